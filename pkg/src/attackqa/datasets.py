"""Train/eval splitting and fine-tuning dataset construction.

The split keeps every distinct document represented in the training set (a
repair pass swaps pairs when uniform sampling strands a document entirely in
eval). The embedding dataset pairs each question with its golden document and
unrelated negatives; the generation dataset builds full answer prompts with
the golden document guaranteed present and shuffled among distractors, plus
refusal rows that teach the model to decline when retrieval misses.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

from .corpus import Document, Tokenizer, default_tokenizer
from .gateway import EmbeddingClient, TransportError
from .ingest import KnowledgeBase
from .qa_gen import MODE_FREE, MODE_SUMMARY, MODE_TEMPLATED, QAPair
from .retrieval import VectorIndex, retrieve
from .service import REFUSAL_SENTINEL, build_answer_prompt

logger = logging.getLogger(__name__)

DEFAULT_EVAL_FRACTION = 0.10
DEFAULT_N_NEG = 7
DEFAULT_REFUSAL_RATIO = 0.125


def derive_seed(seed: int, key: str) -> int:
    """Per-row seed from the global seed and a stable row key, so parallel
    execution order cannot change any output."""
    digest = hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class Split:
    train: list[QAPair]
    eval: list[QAPair]
    seed: int
    validation_fraction_of_train: float = 0.10
    swaps: int = 0
    conflicts: int = 0  # documents that could only be repaired by shrinking eval


def split_train_eval(
    dataset: Sequence[QAPair],
    seed: int,
    eval_fraction: float = DEFAULT_EVAL_FRACTION,
) -> Split:
    """Uniform random split with an all-documents-in-train repair pass.

    Any document whose every pair landed in eval has one of those pairs
    swapped with a train pair belonging to a multi-pair document, preserving
    eval size. When no such train pair exists the eval pair moves to train
    (documents-in-train takes priority over eval size) and the conflict is
    counted.
    """
    if len(dataset) < 10:
        raise ValueError("dataset too small to split")
    rng = random.Random(seed)
    n_eval = round(len(dataset) * eval_fraction)
    eval_indices = set(rng.sample(range(len(dataset)), n_eval))
    train = [p for i, p in enumerate(dataset) if i not in eval_indices]
    eval_pairs = [p for i, p in enumerate(dataset) if i in eval_indices]

    split = Split(train=train, eval=eval_pairs, seed=seed)
    train_doc_counts: dict[str, int] = {}
    for pair in train:
        train_doc_counts[pair.document] = train_doc_counts.get(pair.document, 0) + 1

    stranded = sorted({p.document for p in eval_pairs} - set(train_doc_counts))
    for document in stranded:
        moved = min(
            (p for p in split.eval if p.document == document), key=lambda p: p.question
        )
        swappable = [p for p in split.train if train_doc_counts[p.document] >= 2]
        split.eval.remove(moved)
        split.train.append(moved)
        train_doc_counts[document] = 1
        if swappable:
            out = swappable[rng.randrange(len(swappable))]
            split.train.remove(out)
            split.eval.append(out)
            train_doc_counts[out.document] -= 1
            split.swaps += 1
        else:
            split.conflicts += 1
            logger.warning(
                "no swappable train pair; eval shrunk to keep document in train"
            )
    return split


def _base_id(attack_id: str | None) -> str:
    return attack_id.split(".", 1)[0] if attack_id else ""


def _link_set(kb: KnowledgeBase) -> set[tuple[str, str]]:
    links = kb.__dict__.get("_link_cache")
    if links is None:
        links = set()
        for rel in kb.relationships:
            if rel.source_id and rel.target_id:
                links.add((rel.source_id, rel.target_id))
                links.add((rel.target_id, rel.source_id))
        kb.__dict__["_link_cache"] = links
    return links


def are_related(doc_a: Document, doc_b: Document, kb: KnowledgeBase) -> bool:
    """Two documents are related when their subjects share a base ID
    (T1562.001 ~ T1562.002), one's subject is the other's subject or relation,
    or a relationship row directly links the two subjects."""
    a, b = doc_a.subject_id, doc_b.subject_id
    if a and b and _base_id(a) == _base_id(b):
        return True
    if a and a in (b, doc_b.relation_id):
        return True
    if b and b in (a, doc_a.relation_id):
        return True
    return bool(a and b) and (a, b) in _link_set(kb)


@dataclass
class EmbeddingTuneRow:
    question: str
    positive_docs: list[str]
    negative_docs: list[str]

    def to_record(self) -> dict[str, Any]:
        return {
            "question": self.question,
            "positive_docs": self.positive_docs,
            "negative_docs": self.negative_docs,
        }


@dataclass
class EmbeddingDatasetReport:
    rows: int = 0
    short_pools: int = 0
    empty_pools: int = 0


def build_embedding_dataset(
    train_pairs: Sequence[QAPair],
    corpus: Sequence[Document],
    kb: KnowledgeBase,
    n_neg: int = DEFAULT_N_NEG,
    seed: int = 0,
) -> tuple[list[EmbeddingTuneRow], EmbeddingDatasetReport]:
    """One row per training pair: the golden document as the single positive
    and negatives sampled uniformly from documents unrelated to it."""
    by_text = {doc.text: doc for doc in corpus}
    report = EmbeddingDatasetReport()
    rows = []
    for pair in train_pairs:
        positive = by_text.get(pair.document)
        if positive is None:
            raise ValueError(f"golden document not in corpus for: {pair.question[:80]!r}")
        eligible = [
            doc
            for doc in corpus
            if doc.doc_id != positive.doc_id and not are_related(doc, positive, kb)
        ]
        rng = random.Random(derive_seed(seed, pair.question))
        if len(eligible) >= n_neg:
            negatives = rng.sample(eligible, n_neg)
        elif eligible:
            negatives = list(eligible)
            report.short_pools += 1
            logger.warning("negative pool smaller than n_neg for %r", pair.question[:60])
        else:
            negatives = []
            report.empty_pools += 1
        rows.append(
            EmbeddingTuneRow(
                question=pair.question,
                positive_docs=[positive.text],
                negative_docs=[doc.text for doc in negatives],
            )
        )
    report.rows = len(rows)
    return rows, report


@dataclass
class GenerationTuneRow:
    prompt: str
    completion: str
    contains_golden: bool
    golden_rank: int | None

    def to_record(self) -> dict[str, Any]:
        return {
            "prompt": self.prompt,
            "completion": self.completion,
            "contains_golden": self.contains_golden,
            "golden_rank": self.golden_rank,
        }


@dataclass
class GenerationDatasetReport:
    rows: int = 0
    golden_injected: int = 0
    skipped: int = 0


def reference_urls(pair: QAPair) -> list[str]:
    """Reference URLs for a pair's completion: the URL part of each reference
    source string, deduplicated in order; heuristic pairs cite their own URL."""
    if not pair.references:
        return [pair.url]
    urls: list[str] = []
    for ref in pair.references:
        source = ref.get("source", "")
        url = source.split(": ", 1)[1] if ": " in source else pair.url
        if url not in urls:
            urls.append(url)
    return urls or [pair.url]


def completion_json(pair: QAPair, refusal: bool = False) -> str:
    payload = {
        "thought": pair.thought,
        "answer": REFUSAL_SENTINEL if refusal else pair.answer,
        "references": [] if refusal else reference_urls(pair),
    }
    return json.dumps(payload, ensure_ascii=False)


def build_generation_dataset(
    train_pairs: Sequence[QAPair],
    index: VectorIndex,
    embedder: EmbeddingClient,
    k: int = 5,
    seed: int = 0,
    tags: bool = True,
) -> tuple[list[GenerationTuneRow], GenerationDatasetReport]:
    """RAG prompt/completion rows with guaranteed golden context.

    Top-k documents are retrieved per question; when the golden document is
    absent the rank-k document is replaced by it; the k documents are then
    shuffled so position never predicts the golden document.
    """
    report = GenerationDatasetReport()
    rows = []
    for pair in train_pairs:
        golden_id = index.doc_id_for_text(pair.document)
        if golden_id is None:
            report.skipped += 1
            continue
        try:
            result = retrieve(index, pair.question, k, embedder)
        except TransportError:
            report.skipped += 1
            continue
        docs = list(result.docs)
        if golden_id not in {d.doc_id for d in docs}:
            docs[-1] = index.by_id[golden_id]
            report.golden_injected += 1
        rng = random.Random(derive_seed(seed, pair.question))
        rng.shuffle(docs)
        golden_rank = next(i for i, d in enumerate(docs, start=1) if d.doc_id == golden_id)
        rows.append(
            GenerationTuneRow(
                prompt=build_answer_prompt(pair.question, docs, tags=tags),
                completion=completion_json(pair),
                contains_golden=True,
                golden_rank=golden_rank,
            )
        )
    report.rows = len(rows)
    return rows, report


@dataclass
class RefusalReport:
    rows: int = 0
    target: int = 0
    eligible: int = 0


def build_refusal_examples(
    train_pairs: Sequence[QAPair],
    index: VectorIndex,
    embedder: EmbeddingClient,
    k: int = 5,
    base_count: int | None = None,
    target_ratio: float = DEFAULT_REFUSAL_RATIO,
    seed: int = 0,
    tags: bool = True,
) -> tuple[list[GenerationTuneRow], RefusalReport]:
    """Refusal rows from questions whose golden document is not retrieved in
    the top-k, without golden injection: the completion is the refusal
    sentinel with an empty reference list.

    Rows are emitted until augmented/(base+augmented) reaches the target
    ratio or the eligible pool is exhausted.
    """
    base = base_count if base_count is not None else len(train_pairs)
    report = RefusalReport()
    if target_ratio <= 0:
        return [], report
    report.target = round(base * target_ratio / (1.0 - target_ratio))
    eligible: list[tuple[QAPair, list[Document]]] = []
    for pair in sorted(train_pairs, key=lambda p: p.question):
        golden_id = index.doc_id_for_text(pair.document)
        if golden_id is None:
            continue
        try:
            result = retrieve(index, pair.question, k, embedder)
        except TransportError:
            continue
        if golden_id not in {d.doc_id for d in result.docs}:
            eligible.append((pair, list(result.docs)))
    report.eligible = len(eligible)
    rng = random.Random(derive_seed(seed, "refusal-augmentation"))
    rng.shuffle(eligible)
    chosen = eligible[: report.target]
    if len(chosen) < report.target:
        logger.warning(
            "refusal pool exhausted: %d rows for a target of %d", len(chosen), report.target
        )
    rows = [
        GenerationTuneRow(
            prompt=build_answer_prompt(pair.question, docs, tags=tags),
            completion=completion_json(pair, refusal=True),
            contains_golden=False,
            golden_rank=None,
        )
        for pair, docs in chosen
    ]
    report.rows = len(rows)
    return rows, report


@dataclass
class DatasetSummary:
    total_pairs: int
    mode_counts: dict[str, int]
    mode_percentages: dict[str, float]
    unique_documents: int
    max_doc_tokens: int | None
    min_doc_tokens: int | None
    mean_doc_tokens: float | None
    tokenizer: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "total_pairs": self.total_pairs,
            "mode_counts": self.mode_counts,
            "mode_percentages": self.mode_percentages,
            "unique_documents": self.unique_documents,
            "max_doc_tokens": self.max_doc_tokens,
            "min_doc_tokens": self.min_doc_tokens,
            "mean_doc_tokens": self.mean_doc_tokens,
            "tokenizer": self.tokenizer,
        }


def dataset_summary(
    dataset: Sequence[QAPair], tokenizer: Tokenizer | None = None
) -> DatasetSummary:
    """Counts, per-mode percentages, and token statistics over the unique
    documents referenced by the dataset."""
    tokenizer = tokenizer or default_tokenizer()
    modes = {MODE_SUMMARY: 0, MODE_TEMPLATED: 0, MODE_FREE: 0}
    for pair in dataset:
        modes[pair.mode] += 1
    total = len(dataset)
    unique_docs = sorted({pair.document for pair in dataset})
    lengths = [len(tokenizer.encode(text)) for text in unique_docs]
    return DatasetSummary(
        total_pairs=total,
        mode_counts=modes,
        mode_percentages={
            mode: (100.0 * count / total if total else 0.0) for mode, count in modes.items()
        },
        unique_documents=len(unique_docs),
        max_doc_tokens=max(lengths) if lengths else None,
        min_doc_tokens=min(lengths) if lengths else None,
        mean_doc_tokens=(sum(lengths) / len(lengths)) if lengths else None,
        tokenizer=tokenizer.name,
    )


def write_rows(path: str | Path, rows: Iterable, meta: dict | None = None) -> None:
    """JSONL writer; the first line is a meta header carrying seed, k, and
    ratio parameters."""
    with Path(path).open("w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for row in rows:
            record = row.to_record() if hasattr(row, "to_record") else row
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_rows(path: str | Path) -> tuple[list[dict[str, Any]], dict | None]:
    rows: list[dict[str, Any]] = []
    meta = None
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "_meta" in record and meta is None and not rows:
                meta = record["_meta"]
                continue
            rows.append(record)
    return rows, meta
