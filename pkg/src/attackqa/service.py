"""Live Q&A pipeline: embed the question, retrieve k documents, build the
one-shot answer prompt, parse the model completion, and serve it over HTTP.

The prompt template carries a fixed one-shot example and strict formatting
instructions; the same builder is used for fine-tuning data construction and
for live answering so training and inference see identical bytes.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .corpus import Document
from .gateway import ChatClient, EmbeddingClient, TransportError
from .llmjson import ParseFailure, extract_json
from .qa_gen import THOUGHT_PREFIX, strip_chat_tags
from .retrieval import RetrievalResult, VectorIndex, retrieve

logger = logging.getLogger(__name__)

try:
    from pydantic import BaseModel
except ImportError:  # pragma: no cover - fastapi always brings pydantic
    BaseModel = object

REFUSAL_SENTINEL = "I am sorry, I do not have the answer to the question."


class AskRequest(BaseModel):
    question: str
    k: int | None = None

DEFAULT_K = 5

_PROMPT_HEAD = """<|begin_of_text|><|start_header_id|>system<|end_header_id|>
You are an assistant for generating JSON formatted responses
<|eot_id|><|start_header_id|>user<|end_header_id|>
Respond with a JSON dictionary that includes a thought, answer, and references
The answer must contain text obtained strictly from the given documents.
Avoid any text that is not in the given documents.
Answer using concise, self-contained, grammatically complete sentences.
The answer must be a string with less than four sentences.
Do not mention the documents by number or the context in the answers.
Answer the question strictly using the provided documents.
If you cannot answer the question using the documents, the answer should be "I am sorry, I do not have the answer to the question."
Along with the answer, include a thought that begins with "To answer the question, I need".
The references must contain URLs that exactly match the full URLs in the document headers relevant to by the answer.
There may be multiple references in the references list.
Follow the example below:

Document 1: https://attack.mitre.org/techniques/T1562/001

The campaigns that used attack technique 'T1562.001: Disable or Modify Tools' were: 'C0002: Night Dragon', 'C0024: SolarWinds Compromise', 'C0028: 2015 Ukraine Electric Power Attack', 'C0029: Cutting Edge'

Document 2: https://attack.mitre.org/techniques/T1562/002

The campaigns that used attack technique 'T1562.002: Disable Windows Event Logging' were: 'C0024: SolarWinds Compromise', 'C0025: 2016 Ukraine Electric Power Attack'

Document 3: https://attack.mitre.org/techniques/T1070/001

The campaigns that used attack technique 'T1070.001: Clear Windows Event Logs' were: 'C0014: Operation Wocao'

Question: What campaigns used attack technique 'T1562.002: Disable Windows Event Logging'?
Response:
{
    "thought": "To answer the question, I need to know what campaigns used attack technique 'T1562.002: Disable Windows Event Logging'. The answer is contained in the provided document with URL 'https://attack.mitre.org/techniques/T1562/002'.",
    "answer": "The campaigns that used attack technique 'T1562.002: Disable Windows Event Logging' were: 'C0024: SolarWinds Compromise', 'C0025: 2016 Ukraine Electric Power Attack'",
    "references": ["https://attack.mitre.org/techniques/T1562/002"]
}

"""

_PROMPT_TAIL = """Question: @QUESTION@
The response must be formatted as a JSON instance that conforms to the JSON schema above.
No text should appear before or after the JSON instance.
Response:
<|eot_id|><|start_header_id|>machine-readable JSON<|end_header_id|>"""


def build_answer_prompt(question: str, docs: Sequence[Document], tags: bool = True) -> str:
    """Render the answer prompt: instructions, the fixed one-shot example,
    then one "Document i: <url>" block per retrieved document in retrieval
    order, then the question."""
    if not docs:
        raise ValueError("docs must be non-empty")
    blocks = "".join(
        f"Document {i}: {doc.url}\n\n{doc.text}\n\n" for i, doc in enumerate(docs, start=1)
    )
    prompt = _PROMPT_HEAD + blocks + _PROMPT_TAIL.replace("@QUESTION@", question)
    return prompt if tags else strip_chat_tags(prompt)


@dataclass(frozen=True)
class ParsedAnswer:
    thought: str
    answer: str
    references: list[str]
    refusal: bool
    thought_prefix_ok: bool


def parse_answer(completion: str) -> ParsedAnswer | ParseFailure:
    """Parse a {thought, answer, references} completion.

    Text outside the outermost braces is stripped and lone backslashes
    repaired. A thought that does not start with the required prefix is a
    warning, not a failure. Reference URLs are taken as-is; their correctness
    is measured by the evaluation harness, never silently corrected.
    """
    payload = extract_json(completion, kind="object")
    if isinstance(payload, ParseFailure):
        return payload
    if not isinstance(payload, dict):
        return ParseFailure("schema", "payload is not an object")
    missing = {"thought", "answer", "references"} - set(payload)
    if missing:
        return ParseFailure("schema", f"missing keys: {sorted(missing)}")
    references = payload["references"]
    if not isinstance(references, list) or not all(isinstance(r, str) for r in references):
        return ParseFailure("schema", "references must be a list of strings")
    thought = str(payload["thought"])
    answer = str(payload["answer"])
    prefix_ok = thought.startswith(THOUGHT_PREFIX)
    if not prefix_ok:
        logger.warning("thought does not start with the required prefix: %r", thought[:60])
    refusal = answer == REFUSAL_SENTINEL
    return ParsedAnswer(
        thought=thought,
        answer=answer,
        references=[] if refusal else references,
        refusal=refusal,
        thought_prefix_ok=prefix_ok,
    )


@dataclass
class AnswerRecord:
    """One RAG interaction, as persisted to the interaction log."""

    question: str
    retrieved: RetrievalResult | None
    thought: str = ""
    answer: str = ""
    references: list[str] | None = None
    parse_ok: bool = False
    refusal: bool = False
    golden_rank: int | None = None
    error: str | None = None

    def to_record(self) -> dict[str, Any]:
        return {
            "question": self.question,
            "retrieved": [
                {"doc_id": s.doc.doc_id, "url": s.doc.url, "header": s.doc.header, "score": s.score}
                for s in (self.retrieved.ranked if self.retrieved else [])
            ],
            "thought": self.thought,
            "answer": self.answer,
            "references": self.references or [],
            "parse_ok": self.parse_ok,
            "refusal": self.refusal,
            "golden_rank": self.golden_rank,
            "error": self.error,
        }


def answer_question(
    question: str,
    k: int,
    index: VectorIndex,
    generator: ChatClient,
    embedder: EmbeddingClient,
    golden_text: str | None = None,
    tags: bool = True,
) -> AnswerRecord:
    """Full pipeline composition for one question.

    ``golden_text`` is supplied only in evaluation runs, to record the golden
    document's retrieval rank. Transport failures are contained in the record.
    """
    record = AnswerRecord(question=question, retrieved=None)
    try:
        result = retrieve(index, question, k, embedder)
    except TransportError as exc:
        record.error = f"retrieval failed: {exc}"
        return record
    record.retrieved = result
    if golden_text is not None:
        golden_id = index.doc_id_for_text(golden_text)
        record.golden_rank = result.rank_of(golden_id) if golden_id else None

    prompt = build_answer_prompt(question, result.docs, tags=tags)
    try:
        completion = generator.complete(prompt)
    except TransportError as exc:
        record.error = f"generation failed: {exc}"
        return record

    parsed = parse_answer(completion)
    if isinstance(parsed, ParseFailure):
        record.error = f"parse failure: {parsed.reason}"
        return record
    record.parse_ok = True
    record.thought = parsed.thought
    record.answer = parsed.answer
    record.references = parsed.references
    record.refusal = parsed.refusal
    return record


class InteractionLog:
    """Append-only JSONL log with serialized writes."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, record: AnswerRecord) -> None:
        line = json.dumps({"ts": time.time(), **record.to_record()}, ensure_ascii=False)
        with self._lock:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def create_app(
    index: VectorIndex,
    generator: ChatClient,
    embedder: EmbeddingClient,
    k_default: int = DEFAULT_K,
    token: str | None = None,
    log_path: str | Path | None = None,
    tags: bool = True,
):
    """FastAPI app exposing POST /api/ask, GET /api/health, GET /api/doc/{id}."""
    from fastapi import FastAPI, Header, HTTPException

    app = FastAPI(title="attackqa rag service")
    log = InteractionLog(log_path) if log_path else None

    def check_token(authorization: str | None) -> None:
        if token and authorization != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    @app.post("/api/ask")
    def ask(request: AskRequest, authorization: str | None = Header(default=None)):
        check_token(authorization)
        question = request.question.strip()
        if not question:
            raise HTTPException(status_code=400, detail="question must be non-empty")
        k = request.k or k_default
        record = answer_question(question, k, index, generator, embedder, tags=tags)
        if log:
            log.append(record)
        payload = {
            "answer": record.answer,
            "thought": record.thought,
            "references": record.references or [],
            "refusal": record.refusal,
            "parse_ok": record.parse_ok,
            "error": record.error,
            "retrieved": [
                {"url": s.doc.url, "header": s.doc.header, "score": s.score, "doc_id": s.doc.doc_id}
                for s in (record.retrieved.ranked if record.retrieved else [])
            ],
        }
        if record.error and not record.parse_ok and record.retrieved is None:
            raise HTTPException(status_code=502, detail=payload)
        if record.error and "generation failed" in record.error:
            raise HTTPException(status_code=502, detail=payload)
        return payload

    @app.get("/api/health")
    def health():
        return {
            "status": "ok",
            "index_fingerprint": index.fingerprint,
            "corpus_size": len(index),
            "models": {"generator": generator.cfg.model, "embedder": embedder.cfg.model},
        }

    @app.get("/api/doc/{doc_id}")
    def get_doc(doc_id: str):
        doc = index.by_id.get(doc_id)
        if doc is None:
            raise HTTPException(status_code=404, detail=f"no document {doc_id!r}")
        return doc.to_record()

    return app
