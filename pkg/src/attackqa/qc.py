"""Quality control for generated Q&A pairs.

Three filters run in order: citation grounding (every citation must be
verbatim text from the golden document), duplicate-question removal (a
duplicated question cannot index a single document, so all copies go), and
LLM-grader scoring with threshold filtering. Grader precision/recall against
human annotations is computed here as well.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .gateway import ChatClient, TransportError
from .llmjson import ParseFailure, extract_json
from .qa_gen import QAPair

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.7

_QUESTION_STEPS = """1. Check whether the question is ambiguous.
2. Check whether the question fails to reference specific topics in the context.
3. Check whether the question refers to topics not present in the context.
4. Check whether the question is so broad that it could be answered with information outside of the provided context."""

_ANSWER_STEPS = """1. Check whether the answer is irrelevant to the question.
2. Check whether the answer does not reference pertinent content from the context.
3. Check whether the answer lacks comprehensiveness.
4. Check whether the answer is vague.
5. Check whether the answer includes information not contained within the context."""

_GRADE_TEMPLATE = """You are a strict grader of question-answering datasets.
Evaluate the quality of the {what} below using the evaluation steps, judging it only against the provided context.

Evaluation steps:
{steps}

Context:
{context}

Question: {question}
{answer_line}
Assign an integer grade from 0 to 10, where 10 means none of the issues in the evaluation steps apply.
Return a JSON object: {{"score": <integer 0-10>, "reason": "<one sentence>"}}
No text should appear before or after the JSON object.
"""


@dataclass(frozen=True)
class QCScore:
    question_score: float | None
    answer_score: float | None
    question_reason: str
    answer_reason: str
    grader_model: str

    @property
    def graded(self) -> bool:
        return self.question_score is not None and self.answer_score is not None

    @property
    def min_score(self) -> float | None:
        if not self.graded:
            return None
        return min(self.question_score, self.answer_score)


@dataclass(frozen=True)
class QCAnnotation:
    question: str
    score: float
    reason: str = ""

    @classmethod
    def from_record(cls, record: Mapping) -> "QCAnnotation":
        return cls(
            question=record["question"],
            score=float(record["score"]),
            reason=record.get("reason", ""),
        )


def read_annotations(path: str | Path) -> list[QCAnnotation]:
    """Load a JSONL annotation file of {question, score, reason} records."""
    annotations = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                annotations.append(QCAnnotation.from_record(json.loads(line)))
    return annotations


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


def check_grounding(pair: QAPair) -> bool:
    """True iff every citation is a (whitespace-normalized) contiguous
    substring of the pair's golden document."""
    if not pair.references:
        return False
    document = normalize_ws(pair.document)
    return all(normalize_ws(ref["citation"]) in document for ref in pair.references)


def dedup_questions(dataset: Sequence[QAPair]) -> tuple[list[QAPair], list[QAPair]]:
    """Remove every pair whose exact question occurs more than once (not
    keep-first), so retained questions form a unique index."""
    counts: dict[str, int] = {}
    for pair in dataset:
        counts[pair.question] = counts.get(pair.question, 0) + 1
    retained = [p for p in dataset if counts[p.question] == 1]
    removed = [p for p in dataset if counts[p.question] > 1]
    return retained, removed


def build_grade_prompt(pair: QAPair, metric: str, context_docs: Sequence[str] | None = None) -> str:
    context = "\n\n".join(context_docs) if context_docs else pair.document
    if metric == "question":
        what, steps, answer_line = "question", _QUESTION_STEPS, ""
    elif metric == "answer":
        what, steps = "answer", _ANSWER_STEPS
        answer_line = f"Answer: {pair.answer}\n"
    else:
        raise ValueError("metric must be 'question' or 'answer'")
    return _GRADE_TEMPLATE.format(
        what=what, steps=steps, context=context, question=pair.question, answer_line=answer_line
    )


def parse_grade_completion(completion: str) -> tuple[float | None, str]:
    payload = extract_json(completion, kind="object")
    if isinstance(payload, ParseFailure) or not isinstance(payload, dict):
        return None, "unparseable grade"
    score = payload.get("score")
    if not isinstance(score, (int, float)) or isinstance(score, bool) or not 0 <= score <= 10:
        return None, "unparseable grade"
    return score / 10.0, str(payload.get("reason", ""))


def grade_pair(
    pair: QAPair,
    context_docs: Sequence[str] | None,
    grader_client: ChatClient,
) -> QCScore:
    """Grade question and answer quality on 0-10 scales, normalized to [0, 1].

    Transport failures (after the client's retries) leave the pair ungraded
    rather than raising; ungraded pairs are excluded from filtering decisions.
    """
    scores: dict[str, tuple[float | None, str]] = {}
    for metric in ("question", "answer"):
        prompt = build_grade_prompt(pair, metric, context_docs)
        try:
            completion = grader_client.complete(prompt)
        except TransportError as exc:
            scores[metric] = (None, f"transport failure: {exc}")
            continue
        scores[metric] = parse_grade_completion(completion)
    return QCScore(
        question_score=scores["question"][0],
        answer_score=scores["answer"][0],
        question_reason=scores["question"][1],
        answer_reason=scores["answer"][1],
        grader_model=grader_client.cfg.model,
    )


def filter_by_score(
    scored: Sequence[tuple[QAPair, QCScore]], threshold: float = DEFAULT_THRESHOLD
) -> tuple[list[tuple[QAPair, QCScore]], list[tuple[QAPair, QCScore]]]:
    """Retain pairs whose lower score strictly exceeds the threshold (a score
    equal to the threshold is removed). Ungraded pairs are retained with a
    warning so grader flakiness cannot silently shrink the dataset."""
    retained, removed = [], []
    for pair, score in scored:
        if not score.graded:
            logger.warning("ungraded pair retained: %s", pair.question[:80])
            retained.append((pair, score))
        elif score.min_score > threshold:
            retained.append((pair, score))
        else:
            removed.append((pair, score))
    return retained, removed


@dataclass
class GraderMetrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def precision(self) -> float | None:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) else None

    @property
    def recall(self) -> float | None:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else None

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
        }


def grader_metrics(
    predictions: Mapping[str, float],
    annotations: Sequence[QCAnnotation],
    threshold: float = DEFAULT_THRESHOLD,
) -> GraderMetrics:
    """Precision/recall of predicted scores against human annotations.

    The positive class is "retain" (score > threshold) on both sides. Every
    annotated question must have a prediction.
    """
    missing = [a.question for a in annotations if a.question not in predictions]
    if missing:
        raise ValueError(f"missing predictions for questions: {missing}")
    tp = fp = tn = fn = 0
    for annotation in annotations:
        actual = annotation.score > threshold
        predicted = predictions[annotation.question] > threshold
        if predicted and actual:
            tp += 1
        elif predicted and not actual:
            fp += 1
        elif not predicted and actual:
            fn += 1
        else:
            tn += 1
    return GraderMetrics(tp=tp, fp=fp, tn=tn, fn=fn)


@dataclass
class QCReport:
    input_pairs: int = 0
    grounding_failures: int = 0
    dedup_removed: int = 0
    ungraded: int = 0
    score_removed: int = 0
    retained: int = 0
    threshold: float = DEFAULT_THRESHOLD
    grader_model: str = ""

    def to_dict(self) -> dict:
        return {
            "input_pairs": self.input_pairs,
            "grounding_failures": self.grounding_failures,
            "dedup_removed": self.dedup_removed,
            "ungraded": self.ungraded,
            "score_removed": self.score_removed,
            "retained": self.retained,
            "threshold": self.threshold,
            "grader_model": self.grader_model,
        }


def run_qc(
    dataset: Sequence[QAPair],
    grader_client: ChatClient,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[list[QAPair], QCReport]:
    """Full QC pipeline: grounding, dedup, grading, threshold filtering."""
    report = QCReport(
        input_pairs=len(dataset), threshold=threshold, grader_model=grader_client.cfg.model
    )
    grounded: list[QAPair] = []
    for pair in dataset:
        if not pair.human_answer and not check_grounding(pair):
            report.grounding_failures += 1
            continue
        grounded.append(pair)

    unique, removed = dedup_questions(grounded)
    report.dedup_removed = len(removed)

    scored = [(pair, grade_pair(pair, None, grader_client)) for pair in unique]
    report.ungraded = sum(1 for _, score in scored if not score.graded)
    retained, score_removed = filter_by_score(scored, threshold)
    report.score_removed = len(score_removed)
    report.retained = len(retained)
    return [pair for pair, _ in retained], report
