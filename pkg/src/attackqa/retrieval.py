"""Vector index over the corpus, exact top-k retrieval, and context recall.

The corpus is small enough (tens of thousands of documents) that an
exhaustive cosine scan is used instead of approximate search: ranking is
exact and the recall metric carries no ANN noise. Ties break by ascending
doc_id so results are deterministic.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Document
from .gateway import EmbeddingClient, TransportError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredDoc:
    doc: Document
    score: float


@dataclass
class RetrievalResult:
    query: str
    ranked: list[ScoredDoc]
    truncated: bool = False  # k exceeded corpus size

    @property
    def docs(self) -> list[Document]:
        return [s.doc for s in self.ranked]

    def rank_of(self, doc_id: str) -> int | None:
        """1-based rank of a document, or None if absent."""
        for i, scored in enumerate(self.ranked, start=1):
            if scored.doc.doc_id == doc_id:
                return i
        return None


@dataclass
class RecallReport:
    k: int
    n: int
    hits: int

    @property
    def recall(self) -> float:
        return self.hits / self.n


class VectorIndex:
    """Immutable flat index: one vector per document over the full text."""

    def __init__(self, docs: Sequence[Document], matrix: np.ndarray, fingerprint: str):
        if len(docs) != matrix.shape[0]:
            raise ValueError("document/vector count mismatch")
        order = np.argsort([d.doc_id for d in docs], kind="stable")
        self.docs = [docs[i] for i in order]
        matrix = np.asarray(matrix, dtype=float)[order]
        self.dimension = matrix.shape[1]
        self.fingerprint = fingerprint
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        self._unit = matrix / norms
        self._matrix = matrix
        self.by_id = {d.doc_id: d for d in self.docs}
        self._id_by_text = {d.text: d.doc_id for d in self.docs}

    def __len__(self) -> int:
        return len(self.docs)

    def doc_id_for_text(self, text: str) -> str | None:
        return self._id_by_text.get(text)

    def vectors(self) -> np.ndarray:
        return self._matrix.copy()


def corpus_fingerprint(model: str, docs: Iterable[Document]) -> str:
    h = hashlib.sha256(model.encode("utf-8"))
    for doc in docs:
        h.update(doc.doc_id.encode("utf-8"))
        h.update(doc.text.encode("utf-8"))
    return h.hexdigest()


def build_index(
    corpus: Sequence[Document], embed_client: EmbeddingClient, batch_size: int | None = None
) -> VectorIndex:
    """Embed every document's full text and build the index.

    Deterministic given a deterministic embedder; duplicate doc_ids are
    rejected; an embedding failure aborts the build naming the failed batch.
    """
    if not corpus:
        raise ValueError("empty corpus")
    seen: set[str] = set()
    for doc in corpus:
        if doc.doc_id in seen:
            raise ValueError(f"duplicate doc_id {doc.doc_id!r}")
        seen.add(doc.doc_id)
    if batch_size is not None:
        embed_client.cfg.batch_size = batch_size
    texts = [doc.text for doc in corpus]
    try:
        matrix = embed_client.embed(texts)
    except TransportError as exc:
        raise TransportError(
            f"index build aborted; embedding failed for corpus of {len(corpus)} docs: {exc}",
            exc.attempts,
        ) from exc
    fp = corpus_fingerprint(embed_client.cfg.model, corpus)
    logger.info("built index: %d docs, dim %d", len(corpus), matrix.shape[1])
    return VectorIndex(list(corpus), matrix, fp)


def retrieve(
    index: VectorIndex, question: str, k: int, embed_client: EmbeddingClient
) -> RetrievalResult:
    """Exact top-k by cosine similarity; ties break by ascending doc_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    qv = np.asarray(embed_client.embed([question])[0], dtype=float)
    norm = np.linalg.norm(qv)
    if norm > 0:
        qv = qv / norm
    scores = index._unit @ qv
    # docs are stored sorted by doc_id, so a stable sort on -score keeps the
    # doc_id tie-break.
    order = np.argsort(-scores, kind="stable")[:k]
    ranked = [ScoredDoc(index.docs[i], float(scores[i])) for i in order]
    return RetrievalResult(query=question, ranked=ranked, truncated=k > len(index))


def _golden_doc_id(index: VectorIndex, document_text: str, question: str) -> str:
    doc_id = index.doc_id_for_text(document_text)
    if doc_id is None:
        raise ValueError(f"golden document not in index for question: {question[:80]!r}")
    return doc_id


def context_recall(
    index: VectorIndex,
    eval_pairs: Sequence,
    k: int | Sequence[int],
    embed_client: EmbeddingClient,
) -> RecallReport | dict[int, RecallReport]:
    """Fraction of questions whose golden document appears in the top-k.

    ``k`` may be a single cutoff or several; with several, one retrieval at
    the largest cutoff scores all of them consistently.
    """
    ks = sorted({k} if isinstance(k, int) else set(k))
    if not eval_pairs:
        raise ValueError("empty evaluation set")
    hits = {cutoff: 0 for cutoff in ks}
    for pair in eval_pairs:
        golden = _golden_doc_id(index, pair.document, pair.question)
        result = retrieve(index, pair.question, max(ks), embed_client)
        rank = result.rank_of(golden)
        for cutoff in ks:
            if rank is not None and rank <= cutoff:
                hits[cutoff] += 1
    reports = {
        cutoff: RecallReport(k=cutoff, n=len(eval_pairs), hits=hits[cutoff]) for cutoff in ks
    }
    return reports[ks[0]] if isinstance(k, int) else reports


def save_index(index: VectorIndex, directory: str | Path) -> None:
    """Persist as vectors.npy + docs.jsonl + manifest.json (npz containers
    embed timestamps and would break byte-reproducibility)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "vectors.npy", index._matrix)
    with (directory / "docs.jsonl").open("w", encoding="utf-8") as fh:
        for doc in index.docs:
            fh.write(json.dumps(doc.to_record(), ensure_ascii=False) + "\n")
    (directory / "manifest.json").write_text(
        json.dumps(
            {
                "dimension": index.dimension,
                "count": len(index),
                "fingerprint": index.fingerprint,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )


def load_index(directory: str | Path) -> VectorIndex:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    matrix = np.load(directory / "vectors.npy")
    docs = []
    with (directory / "docs.jsonl").open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                docs.append(Document.from_record(json.loads(line)))
    return VectorIndex(docs, matrix, manifest["fingerprint"])
