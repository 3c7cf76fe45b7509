"""Pipeline evaluation: context recall at k, answer parsing success, correct
reference rate, and judged soft/hard correctness.

Hard correctness always scores the generated answer against the true answer.
Soft correctness additionally awards full credit when retrieval missed the
golden document and the model explicitly refused; a hallucinated answer on a
retrieval miss is still judged on its merits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .gateway import ChatClient, EmbeddingClient, TransportError
from .llmjson import ParseFailure
from .qa_gen import QAPair
from .qc import parse_grade_completion
from .retrieval import VectorIndex, retrieve
from .service import build_answer_prompt, parse_answer

logger = logging.getLogger(__name__)

DEFAULT_RECALL_KS = (1, 5, 10)

_JUDGE_TEMPLATE = """You are a strict judge of answer correctness for a question-answering system.

Evaluation steps:
1. Penalize the generated answer if it contradicts the true answer.
2. Penalize the generated answer if it omits details from the true answer that are relevant to the question.
3. Penalize the generated answer if it includes irrelevant details that are not present in the true answer.

Question: {question}
True answer: {true_answer}
Generated answer: {generated_answer}

Assign an integer correctness grade from 0 to 10, where 10 means the generated answer fully matches the true answer.
Return a JSON object: {{"score": <integer 0-10>, "reason": "<one sentence>"}}
No text should appear before or after the JSON object.
"""


def build_judge_prompt(question: str, true_answer: str, generated_answer: str) -> str:
    return _JUDGE_TEMPLATE.format(
        question=question, true_answer=true_answer, generated_answer=generated_answer
    )


def judge_answer(
    question: str, true_answer: str, generated_answer: str, judge_client: ChatClient
) -> tuple[float | None, str]:
    """Ask the judge endpoint for a 0-10 correctness grade, normalized to
    [0, 1]. Unparseable grades and transport failures yield a null score."""
    prompt = build_judge_prompt(question, true_answer, generated_answer)
    try:
        completion = judge_client.complete(prompt)
    except TransportError as exc:
        return None, f"transport failure: {exc}"
    return parse_grade_completion(completion)


@dataclass
class EvalRecord:
    """One evaluated interaction with its judged scores."""

    question: str
    true_answer: str
    golden_url: str
    golden_rank: int | None
    golden_hit: bool
    parse_ok: bool
    refusal: bool
    answer: str = ""
    thought: str = ""
    references: list[str] = field(default_factory=list)
    reference_correct: bool = False
    judge_score: float | None = None
    judge_reason: str = ""
    soft_score: float | None = None
    hard_score: float | None = None
    error: str | None = None

    def to_record(self) -> dict[str, Any]:
        return {
            "question": self.question,
            "true_answer": self.true_answer,
            "golden_url": self.golden_url,
            "golden_rank": self.golden_rank,
            "golden_hit": self.golden_hit,
            "parse_ok": self.parse_ok,
            "refusal": self.refusal,
            "answer": self.answer,
            "thought": self.thought,
            "references": self.references,
            "reference_correct": self.reference_correct,
            "judge_score": self.judge_score,
            "judge_reason": self.judge_reason,
            "soft_score": self.soft_score,
            "hard_score": self.hard_score,
            "error": self.error,
        }

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> "EvalRecord":
        return cls(**{k: record.get(k) for k in cls.__dataclass_fields__})


def reference_correct(record: EvalRecord) -> bool:
    """True iff the golden URL is an exact string member of the references.
    No URL normalization: the prompt demands exact matches."""
    return record.parse_ok and record.golden_url in record.references


def score_record(record: EvalRecord) -> tuple[float | None, float | None]:
    """Soft/hard correctness per the scoring rules.

    Soft forgives only (retrieval miss AND explicit refusal) with full credit;
    a refusal on a retrieval hit is judged normally, and a wrong answer on a
    miss keeps the judge's score. Hard is always the judge's score.
    """
    if not record.golden_hit and record.refusal:
        return 1.0, record.judge_score
    return record.judge_score, record.judge_score


@dataclass
class EvalReport:
    """Aggregate metric row for one embedding/generation configuration."""

    embedding_model: str
    generator_model: str
    judge_model: str
    k: int
    n: int
    recall: dict[int, float]  # percent, per recall cutoff
    parse_success_pct: float
    correct_reference_pct: float | None
    soft_correctness_pct: float | None
    hard_correctness_pct: float | None
    judge_nulls: int
    parsed_count: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": {
                "embedding_model": self.embedding_model,
                "generator_model": self.generator_model,
                "judge_model": self.judge_model,
                "k": self.k,
                "n": self.n,
            },
            "metrics": {
                "context_recall_pct": {str(k): v for k, v in sorted(self.recall.items())},
                "answer_parsing_success_pct": self.parse_success_pct,
                "correct_reference_pct": self.correct_reference_pct,
                "mean_correctness_soft_pct": self.soft_correctness_pct,
                "mean_correctness_hard_pct": self.hard_correctness_pct,
            },
            "judge_nulls": self.judge_nulls,
            "parsed_count": self.parsed_count,
        }

    def to_markdown(self) -> str:
        config = f"{self.embedding_model} / {self.generator_model}"

        def fmt(value: float | None) -> str:
            return f"{value:.2f}" if value is not None else "n/a"

        lines = [
            f"| Metric | {config} |",
            "| --- | --- |",
            f"| % Context Recall at k={self.k} | {fmt(self.recall.get(self.k))} |",
            f"| % Answer parsing success | {fmt(self.parse_success_pct)} |",
            f"| % Correct reference | {fmt(self.correct_reference_pct)} |",
            f"| % Mean Correctness (soft) | {fmt(self.soft_correctness_pct)} |",
            f"| % Mean Correctness (hard) | {fmt(self.hard_correctness_pct)} |",
        ]
        for cutoff in sorted(self.recall):
            if cutoff != self.k:
                lines.append(f"| % Context Recall at k={cutoff} | {fmt(self.recall[cutoff])} |")
        lines.append(f"| evaluated questions | {self.n} |")
        lines.append(f"| unscored (judge failures) | {self.judge_nulls} |")
        return "\n".join(lines) + "\n"


def evaluate_pair(
    pair: QAPair,
    index: VectorIndex,
    embedder: EmbeddingClient,
    generator: ChatClient,
    judge: ChatClient,
    k: int,
    max_k: int,
    tags: bool = True,
) -> EvalRecord:
    """Evaluate one pair end to end; component failures are contained in the
    record, never raised."""
    record = EvalRecord(
        question=pair.question,
        true_answer=pair.answer,
        golden_url=pair.url,
        golden_rank=None,
        golden_hit=False,
        parse_ok=False,
        refusal=False,
    )
    golden_id = index.doc_id_for_text(pair.document)
    if golden_id is None:
        record.error = "golden document not in index"
        record.judge_score, record.judge_reason = 0.0, record.error
        record.soft_score, record.hard_score = score_record(record)
        return record

    try:
        result = retrieve(index, pair.question, max_k, embedder)
    except TransportError as exc:
        record.error = f"retrieval failed: {exc}"
        record.judge_score, record.judge_reason = 0.0, "retrieval failed"
        record.soft_score, record.hard_score = score_record(record)
        return record
    record.golden_rank = result.rank_of(golden_id)
    record.golden_hit = record.golden_rank is not None and record.golden_rank <= k

    parsed = None
    try:
        completion = generator.complete(
            build_answer_prompt(pair.question, result.docs[:k], tags=tags)
        )
        parsed = parse_answer(completion)
    except TransportError as exc:
        record.error = f"generation failed: {exc}"
    if parsed is None or isinstance(parsed, ParseFailure):
        if isinstance(parsed, ParseFailure):
            record.error = f"parse failure: {parsed.reason}"
        # No parsed answer: scores zero, not null, so the failure counts
        # against both correctness means.
        record.judge_score, record.judge_reason = 0.0, "answer parsing failed"
        record.soft_score, record.hard_score = score_record(record)
        return record

    record.parse_ok = True
    record.answer = parsed.answer
    record.thought = parsed.thought
    record.references = parsed.references
    record.refusal = parsed.refusal
    record.reference_correct = reference_correct(record)
    record.judge_score, record.judge_reason = judge_answer(
        pair.question, pair.answer, parsed.answer, judge
    )
    record.soft_score, record.hard_score = score_record(record)
    return record


def aggregate(
    records: Sequence[EvalRecord],
    k: int,
    recall_ks: Sequence[int],
    embedding_model: str,
    generator_model: str,
    judge_model: str,
) -> EvalReport:
    """Fold records into the report; recomputing a report from its persisted
    records reproduces it exactly."""
    n = len(records)
    if n == 0:
        raise ValueError("no records to aggregate")
    recall = {
        cutoff: 100.0
        * sum(1 for r in records if r.golden_rank is not None and r.golden_rank <= cutoff)
        / n
        for cutoff in sorted(set(recall_ks) | {k})
    }
    parsed = [r for r in records if r.parse_ok]
    soft = [r.soft_score for r in records if r.soft_score is not None]
    hard = [r.hard_score for r in records if r.hard_score is not None]
    return EvalReport(
        embedding_model=embedding_model,
        generator_model=generator_model,
        judge_model=judge_model,
        k=k,
        n=n,
        recall=recall,
        parse_success_pct=100.0 * len(parsed) / n,
        correct_reference_pct=(
            100.0 * sum(1 for r in parsed if r.reference_correct) / len(parsed)
            if parsed
            else None
        ),
        soft_correctness_pct=(100.0 * sum(soft) / len(soft)) if soft else None,
        hard_correctness_pct=(100.0 * sum(hard) / len(hard)) if hard else None,
        judge_nulls=sum(1 for r in records if r.soft_score is None),
        parsed_count=len(parsed),
    )


def run_eval(
    eval_pairs: Sequence[QAPair],
    index: VectorIndex,
    embedder: EmbeddingClient,
    generator: ChatClient,
    judge: ChatClient,
    k: int = 5,
    recall_ks: Sequence[int] = DEFAULT_RECALL_KS,
    tags: bool = True,
) -> tuple[EvalReport, list[EvalRecord]]:
    """Evaluate every pair and aggregate the metric suite."""
    if not eval_pairs:
        raise ValueError("empty evaluation set")
    max_k = max(max(recall_ks, default=k), k)
    records = [
        evaluate_pair(pair, index, embedder, generator, judge, k, max_k, tags=tags)
        for pair in eval_pairs
    ]
    report = aggregate(
        records,
        k,
        recall_ks,
        embedding_model=embedder.cfg.model,
        generator_model=generator.cfg.model,
        judge_model=judge.cfg.model,
    )
    logger.info("eval complete: %s", report.to_dict()["metrics"])
    return report, records


def write_eval_records(path: str | Path, records: Sequence[EvalRecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_record(), ensure_ascii=False) + "\n")


def read_eval_records(path: str | Path) -> list[EvalRecord]:
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(EvalRecord.from_record(json.loads(line)))
    return records
