"""Produce Q&A pairs from corpus documents.

Three modes: fully heuristic pairs from relation-summary documents, templated
questions with LLM answers, and fully LLM-generated question/answer sets. The
``human_question``/``human_answer`` flags on each pair record which mode
produced it.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .corpus import Document, Tokenizer, default_tokenizer, quoted_label
from .ingest import CATEGORIES, SINGULAR
from .llmjson import ParseFailure, extract_json

logger = logging.getLogger(__name__)

MODE_SUMMARY = "summary"
MODE_TEMPLATED = "templated"
MODE_FREE = "free"

COUNT_PHRASES = ("one set", "two sets", "three sets")

THOUGHT_PREFIX = "To answer the question, I need"

# Llama-style chat tags; stripped for endpoints that declare a plain chat style.
_TAG_RX = re.compile(r"<\|begin_of_text\|>|<\|eot_id\|>|<\|start_header_id\|>[^|]*<\|end_header_id\|>")

_DOCGEN_TEMPLATE = """<|begin_of_text|><|start_header_id|>system<|end_header_id|>
    You are a JSON generator who generates machine-readable JSON<|eot_id|><|start_header_id|>user<|end_header_id|>
            Based on the following document, follow the instruction below
            Document:
            @DOCUMENT@
            Instruction:
            Generate @COUNT@
            JSON format:
            [
                {
                    "question": "<generated question>",
                    "thought": "<generated thought on what is needed to answer the question. Start with 'To answer the question, I need'>",
                    "answer": "<generated answer>",
                    "references": [
                        "<verbatim text from document that supports the answer>",
                        "<verbatim text from document that supports the answer>"
                    ]
                }
            ]
            The first character of the response must be '[' and the last character must be ']'. No header text should be included.
            <|eot_id|><|start_header_id|>JSON list<|end_header_id|>
            """

# Same structure with the question injected and the count fixed to one set,
# used when the question is templated and only the answer is generated.
_TEMPLATED_TEMPLATE = _DOCGEN_TEMPLATE.replace(
    "            Instruction:",
    "            Question:\n            @QUESTION@\n            Instruction:",
).replace("@COUNT@", "one set")


def strip_chat_tags(prompt: str) -> str:
    return _TAG_RX.sub("", prompt).lstrip("\n")


def build_docgen_prompt(doc: Document | str, count: str = "three sets", tags: bool = True) -> str:
    """Prompt asking the model for up to three {question, thought, answer,
    references} sets from one document."""
    if count not in COUNT_PHRASES:
        raise ValueError(f"count must be one of {COUNT_PHRASES}")
    text = doc.text if isinstance(doc, Document) else doc
    prompt = _DOCGEN_TEMPLATE.replace("@DOCUMENT@", text).replace("@COUNT@", count)
    return prompt if tags else strip_chat_tags(prompt)


def build_templated_prompt(doc: Document | str, question: str, tags: bool = True) -> str:
    """Docgen prompt variant for a fixed, human-templated question."""
    text = doc.text if isinstance(doc, Document) else doc
    prompt = _TEMPLATED_TEMPLATE.replace("@DOCUMENT@", text).replace("@QUESTION@", question)
    return prompt if tags else strip_chat_tags(prompt)


def choose_count(doc: Document, tokenizer: Tokenizer | None = None) -> str:
    """Sets per completion by document length: short documents yield one pair,
    long ones up to three."""
    tokenizer = tokenizer or default_tokenizer()
    n_tokens = len(tokenizer.encode(doc.text))
    if n_tokens < 80:
        return "one set"
    if n_tokens <= 250:
        return "two sets"
    return "three sets"


@dataclass
class QAPair:
    """One dataset record; exactly the fifteen serialized fields."""

    question: str
    thought: str
    answer: str
    document: str
    subject_id: str
    subject_name: str
    subject_type: str
    url: str
    source: str
    references: list[dict[str, str]] | None
    human_question: bool
    human_answer: bool
    field: str | None = None
    relation_id: str | None = None
    relation_name: str | None = None

    def to_record(self) -> dict[str, Any]:
        return {
            "question": self.question,
            "thought": self.thought,
            "answer": self.answer,
            "document": self.document,
            "subject_id": self.subject_id,
            "subject_name": self.subject_name,
            "subject_type": self.subject_type,
            "url": self.url,
            "source": self.source,
            "references": self.references,
            "human_question": self.human_question,
            "human_answer": self.human_answer,
            "field": self.field,
            "relation_id": self.relation_id,
            "relation_name": self.relation_name,
        }

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> "QAPair":
        return cls(**{k: record.get(k) for k in cls.__dataclass_fields__})

    @property
    def mode(self) -> str:
        if self.human_question and self.human_answer:
            return MODE_SUMMARY
        if self.human_question:
            return MODE_TEMPLATED
        return MODE_FREE


def write_pairs(path: str | Path, pairs: Iterable[QAPair], meta: dict | None = None) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for pair in pairs:
            fh.write(json.dumps(pair.to_record(), ensure_ascii=False) + "\n")


def read_pairs(path: str | Path) -> list[QAPair]:
    pairs = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "_meta" in record:
                continue
            pairs.append(QAPair.from_record(record))
    return pairs


def _decapitalize(text: str) -> str:
    return text[0].lower() + text[1:] if text else text


def _summary_group(doc: Document) -> str:
    source = doc.source
    if not source.startswith("relationships_") or "_for_" not in source:
        raise ValueError(f"not a relation-summary document: {source!r}")
    return source[len("relationships_") : source.index("_for_")]


def _subject_phrase(doc: Document) -> tuple[str, str]:
    """Recover the quoted subject phrase from a summary sentence and pick the
    question template. Returns (phrase, question)."""
    body = doc.body
    group = _summary_group(doc)
    if group == "campaigns" and body.startswith("The campaigns attributed to "):
        prefix, sep = "The campaigns attributed to ", "' were: "
        template = "What campaigns are attributed to {phrase}?"
    elif group == "campaigns":
        prefix, sep = "The campaigns that used ", "' were: "
        template = "What campaigns used {phrase}?"
    elif group == "groups":
        prefix, sep = "The groups that used ", "' were: "
        template = "What groups used {phrase}?"
    elif group == "software":
        prefix, sep = "The software procedures that use ", "' are: "
        template = "What software procedures use {phrase}?"
    elif group == "data_components":
        match = re.match(r"The following \d+ data components can be used to detect ", body)
        prefix = match.group(0) if match else ""
        sep = "': "
        template = "What data components can be used to detect {phrase}?"
    elif group == "mitigations":
        match = re.match(r"The following \d+ mitigations can be used to mitigate ", body)
        prefix = match.group(0) if match else ""
        sep = "': "
        template = "What mitigations can be used to mitigate {phrase}?"
    elif group == "tactics":
        prefix, sep = "Tactics used in ", "': "
        template = "What tactics are used in {phrase}?"
    else:
        raise ValueError(f"unrecognized summary group {group!r}")
    if not prefix or not body.startswith(prefix) or sep not in body:
        raise ValueError(f"summary body does not match the {group} template")
    phrase = body[len(prefix) : body.index(sep) + 1]
    return phrase, template.format(phrase=phrase)


def gen_summary_qa(summary_doc: Document) -> QAPair:
    """Heuristic pair for a relation-summary document: templated question and
    thought, answer equal to the document body."""
    _, question = _subject_phrase(summary_doc)
    thought = f"{THOUGHT_PREFIX} to know {_decapitalize(question[:-1])}"
    return QAPair(
        question=question,
        thought=thought,
        answer=summary_doc.body,
        document=summary_doc.text,
        subject_id=summary_doc.subject_id,
        subject_name=summary_doc.subject_name,
        subject_type=summary_doc.subject_type,
        url=summary_doc.url,
        source=summary_doc.source,
        references=None,
        human_question=True,
        human_answer=True,
    )


_RELATION_QUESTIONS = {
    "uses": (" uses ", "How does {src} use {tgt}?"),
    "detects": (" can be used to detect ", "How can {src} detect {tgt}?"),
    "mitigates": (" mitigates ", "How can {src} mitigate {tgt}?"),
    "attributed-to": (" is attributed to ", "How is {src} attributed to {tgt}?"),
}


def gen_templated_question(doc: Document) -> str:
    """Templated question for a description or per-relationship document."""
    if doc.source in CATEGORIES:
        label = quoted_label(doc.subject_id, doc.subject_name)
        return f"Describe attack {SINGULAR[doc.subject_type]} {label}"
    if doc.source.startswith("relationships_") and "_for_" not in doc.source:
        mapping = doc.source.split("_", 2)[1]
        joiner, template = _RELATION_QUESTIONS[mapping]
        head = doc.header[len("How ") : -1]
        src, tgt = head.split(joiner, 1)
        return template.format(src=src, tgt=tgt)
    raise ValueError(f"no question template for source {doc.source!r}")


def parse_qa_completion(completion: str) -> list[dict[str, Any]] | ParseFailure:
    """Parse a docgen completion into {question, thought, answer, references}
    entries. Prose around the JSON list is stripped and lone backslashes are
    repaired; schema violations fail the whole completion."""
    payload = extract_json(completion, kind="array")
    if isinstance(payload, ParseFailure):
        return payload
    if not isinstance(payload, list):
        return ParseFailure("schema", "payload is not a list")
    for entry in payload:
        if not isinstance(entry, dict):
            return ParseFailure("schema", "entry is not an object")
        missing = {"question", "thought", "answer", "references"} - set(entry)
        if missing:
            return ParseFailure("schema", f"missing keys: {sorted(missing)}")
        refs = entry["references"]
        if not isinstance(refs, list) or not all(isinstance(r, str) for r in refs):
            return ParseFailure("schema", "references must be a list of strings")
    return payload


@dataclass
class GenerationReport:
    docs_processed: int = 0
    attempts: int = 0
    parse_successes: int = 0
    parse_failures: int = 0
    transport_failures: int = 0
    pairs_by_mode: dict[str, int] = field(default_factory=dict)
    failure_reasons: list[str] = field(default_factory=list)

    def record_pairs(self, mode: str, count: int) -> None:
        self.pairs_by_mode[mode] = self.pairs_by_mode.get(mode, 0) + count

    def to_dict(self) -> dict[str, Any]:
        return {
            "docs_processed": self.docs_processed,
            "attempts": self.attempts,
            "parse_successes": self.parse_successes,
            "parse_failures": self.parse_failures,
            "transport_failures": self.transport_failures,
            "parse_success_rate": (
                self.parse_successes / self.attempts if self.attempts else None
            ),
            "pairs_by_mode": dict(sorted(self.pairs_by_mode.items())),
            "failure_reasons": self.failure_reasons[:50],
        }


def _reference_source(doc: Document) -> str:
    if doc.field:
        path = f"{doc.subject_type}/{doc.subject_id}/{doc.field}"
    else:
        path = f"{doc.subject_id}/{doc.relation_name}"
    return f"{path}: {doc.url}"


def generate_from_document(
    doc: Document,
    llm_client,
    mode: str,
    tokenizer: Tokenizer | None = None,
    report: GenerationReport | None = None,
    tags: bool = True,
) -> list[QAPair]:
    """Generate pairs for one document in templated or free mode.

    Transport and parse failures never raise past this call; they are counted
    in the report and yield zero pairs.
    """
    from .gateway import TransportError

    if mode not in (MODE_TEMPLATED, MODE_FREE):
        raise ValueError(f"mode must be {MODE_TEMPLATED!r} or {MODE_FREE!r}")
    report = report if report is not None else GenerationReport()

    if mode == MODE_TEMPLATED:
        question = gen_templated_question(doc)
        prompt = build_templated_prompt(doc, question, tags=tags)
    else:
        prompt = build_docgen_prompt(doc, choose_count(doc, tokenizer), tags=tags)

    report.attempts += 1
    try:
        completion = llm_client.complete(prompt)
    except TransportError as exc:
        report.transport_failures += 1
        report.parse_failures += 1
        report.failure_reasons.append(f"transport: {exc}")
        return []

    entries = parse_qa_completion(completion)
    if isinstance(entries, ParseFailure):
        report.parse_failures += 1
        report.failure_reasons.append(f"{entries.reason}: {entries.detail[:120]}")
        return []
    report.parse_successes += 1

    if mode == MODE_TEMPLATED:
        entries = entries[:1]
    ref_source = _reference_source(doc)
    pairs = []
    for entry in entries:
        pairs.append(
            QAPair(
                question=question if mode == MODE_TEMPLATED else entry["question"],
                thought=entry["thought"],
                answer=entry["answer"],
                document=doc.text,
                subject_id=doc.subject_id,
                subject_name=doc.subject_name,
                subject_type=doc.subject_type,
                url=doc.url,
                source=doc.source,
                references=[{"source": ref_source, "citation": c} for c in entry["references"]],
                human_question=mode == MODE_TEMPLATED,
                human_answer=False,
                field=doc.field,
                relation_id=doc.relation_id,
                relation_name=doc.relation_name,
            )
        )
    report.record_pairs(mode, len(pairs))
    return pairs


def generate_dataset(
    corpus: Sequence[Document],
    llm_client,
    tokenizer: Tokenizer | None = None,
    tags: bool = True,
) -> tuple[list[QAPair], GenerationReport]:
    """Run all three modes over a corpus.

    Summary documents get their heuristic pair; description and
    per-relationship documents get a templated pair and free-generated pairs.
    """
    report = GenerationReport()
    pairs: list[QAPair] = []
    for doc in corpus:
        report.docs_processed += 1
        if "_for_" in doc.source:
            pairs.append(gen_summary_qa(doc))
            report.record_pairs(MODE_SUMMARY, 1)
            continue
        pairs.extend(
            generate_from_document(doc, llm_client, MODE_TEMPLATED, tokenizer, report, tags)
        )
        pairs.extend(
            generate_from_document(doc, llm_client, MODE_FREE, tokenizer, report, tags)
        )
    logger.info("generated %d pairs: %s", len(pairs), report.pairs_by_mode)
    return pairs, report
