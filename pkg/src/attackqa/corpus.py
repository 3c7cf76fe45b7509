"""Clean raw descriptions and build the retrieval corpus.

Three document families are produced from a knowledge base: entity
description documents, one document per relationship, and synthetic
relation-summary documents that aggregate every relationship of one kind for
one entity so list-style questions are answerable from a single retrieval
unit.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Protocol

from .ingest import SINGULAR, Entity, KnowledgeBase, Relationship

_LINK_RX = re.compile(r"\[([^\]]*)\]\(\s*[^)]*\)")
_CITATION_RX = re.compile(r"\s*\(Citation:[^)]*\)")
_NEWLINE_RUN_RX = re.compile(r"[ \t]*[\r\n]+[ \t\r\n]*")

# Relationship source-type -> the phrase used inside document text. Entities
# are labelled 'ID: Name'; data components have no ATT&CK ID and use the bare
# quoted name.
_SOURCE_PHRASE = {
    "software": "attack software",
    "group": "attack group",
    "campaign": "attack campaign",
    "data component": "data component",
    "mitigation strategy": "mitigation",
}
_TARGET_PHRASE = {"technique": "attack technique", "software": "attack software", "group": "attack group"}

_SOURCE_TAG = {
    "software": "software",
    "group": "group",
    "campaign": "campaign",
    "data component": "data_component",
    "mitigation strategy": "mitigation",
}
_GROUP_TAG = {
    "software": "software",
    "group": "groups",
    "campaign": "campaigns",
    "data component": "data_components",
    "mitigation strategy": "mitigations",
}

_TARGET_CATEGORY = {"technique": "techniques", "software": "software", "group": "groups"}


class Tokenizer(Protocol):
    name: str

    def encode(self, text: str) -> list: ...


class WhitespacePunctTokenizer:
    """Approximate tokenizer: one token per word or punctuation mark."""

    name = "whitespace_punct"
    _rx = re.compile(r"\w+|[^\w\s]")

    def encode(self, text: str) -> list[str]:
        return self._rx.findall(text)


def default_tokenizer() -> Tokenizer:
    """cl100k_base when tiktoken is installed, else the documented
    whitespace+punctuation approximation."""
    try:
        import tiktoken

        encoding = tiktoken.get_encoding("cl100k_base")

        class _Tiktoken:
            name = "cl100k_base"

            def encode(self, text: str) -> list[int]:
                return encoding.encode(text)

        return _Tiktoken()
    except ImportError:
        return WhitespacePunctTokenizer()


def clean_text(raw: str) -> str:
    """Rewrite raw markdown-ish source text to plain text.

    Markdown links keep their display text, "(Citation: ...)" markers are
    removed together with the whitespace that preceded them, and each internal
    newline run becomes a single space. Idempotent: cleaning cleaned text is a
    no-op.
    """
    text = _LINK_RX.sub(lambda m: m.group(1), raw)
    text = _CITATION_RX.sub("", text)
    text = _NEWLINE_RUN_RX.sub(" ", text)
    return text.strip()


@dataclass(frozen=True)
class Document:
    """One retrieval unit: a cleaned header/body pair with provenance."""

    doc_id: str
    header: str
    body: str
    url: str
    source: str
    subject_id: str
    subject_name: str
    subject_type: str
    relation_id: str | None = None
    relation_name: str | None = None
    field: str | None = None

    @property
    def text(self) -> str:
        """Canonical full text: the header line followed by the body line.
        Summary documents have no header and are a single sentence."""
        return f"{self.header}\n{self.body}" if self.header else self.body

    def to_record(self) -> dict[str, Any]:
        return {
            "doc_id": self.doc_id,
            "header": self.header,
            "body": self.body,
            "url": self.url,
            "source": self.source,
            "subject_id": self.subject_id,
            "subject_name": self.subject_name,
            "subject_type": self.subject_type,
            "relation_id": self.relation_id,
            "relation_name": self.relation_name,
            "field": self.field,
        }

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> "Document":
        return cls(**{k: record.get(k) for k in cls.__dataclass_fields__})


def _doc_id(header: str, body: str) -> str:
    return hashlib.sha256(f"{header}\x1f{body}".encode("utf-8")).hexdigest()[:16]


def make_document(header: str, body: str, **meta: Any) -> Document:
    return Document(doc_id=_doc_id(header, body), header=header, body=body, **meta)


def quoted_label(attack_id: str, name: str) -> str:
    return f"'{attack_id}: {name}'" if attack_id else f"'{name}'"


@dataclass
class CorpusBuildReport:
    description_docs: int = 0
    relation_docs: int = 0
    summary_docs: int = 0
    skipped_empty: int = 0
    skipped_unresolved_subject: int = 0


@dataclass
class CorpusStats:
    doc_count: int
    max_tokens: int
    min_tokens: int
    mean_tokens: float
    tokenizer: str


def build_description_doc(entity: Entity) -> Document:
    """Document for one entity description.

    Header form: ``Description of attack group 'G1024: Akira':``.
    Raises ValueError on an empty description (callers skip and count).
    """
    if not entity.description:
        raise ValueError(f"{entity.id}: empty description")
    header = f"Description of attack {SINGULAR[entity.category]} {quoted_label(entity.id, entity.name)}:"
    return make_document(
        header=header,
        body=clean_text(entity.description),
        url=entity.url,
        source=entity.category,
        subject_id=entity.id,
        subject_name=entity.name,
        subject_type=entity.category,
        field="description",
    )


def _source_phrase(rel: Relationship) -> str:
    noun = _SOURCE_PHRASE[rel.source_type]
    label = quoted_label(rel.source_id, rel.source_name)
    return f"{noun} {label}"


def _target_phrase(rel: Relationship) -> str:
    noun = _TARGET_PHRASE[rel.target_type]
    label = quoted_label(rel.target_id, rel.target_name)
    return f"{noun} {label}"


_RELATION_HEADERS = {
    "uses": "How {src} uses {tgt}:",
    "detects": "How {src} can be used to detect {tgt}:",
    "mitigates": "How {src} mitigates {tgt}:",
    "attributed-to": "How {src} is attributed to {tgt}:",
}


def build_relation_doc(rel: Relationship, kb: KnowledgeBase) -> Document:
    """Document for one relationship row.

    Header form: ``How attack software 'S0467: TajMahal' uses attack
    technique 'T1123: Audio Capture':``. The subject is the target entity and
    the relation is the source. Raises ValueError on an empty mapping
    description or an unresolvable target (callers skip and count).
    """
    if not rel.mapping_description:
        raise ValueError("empty mapping description")
    subject = kb.entity(rel.target_id)
    if subject is None:
        raise LookupError(f"target {rel.target_id!r} not in knowledge base")
    header = _RELATION_HEADERS[rel.mapping_type].format(
        src=_source_phrase(rel), tgt=_target_phrase(rel)
    )
    relation_entity = kb.entity(rel.source_id) if rel.source_id else None
    return make_document(
        header=header,
        body=clean_text(rel.mapping_description),
        url=subject.url,
        source=f"relationships_{rel.mapping_type}_{_SOURCE_TAG[rel.source_type]}",
        subject_id=subject.id,
        subject_name=subject.name,
        subject_type=subject.category,
        relation_id=rel.source_id or None,
        relation_name=(relation_entity.name if relation_entity else rel.source_name) or None,
    )


def _summary_sentence(source_type: str, mapping_type: str, tgt_phrase: str,
                      items: list[tuple[str, str]]) -> str:
    quoted = ", ".join(quoted_label(i, n) for i, n in items)
    key = (source_type, mapping_type)
    if key == ("campaign", "uses"):
        return f"The campaigns that used {tgt_phrase} were: {quoted}"
    if key == ("software", "uses"):
        return f"The software procedures that use {tgt_phrase} are: {quoted}"
    if key == ("group", "uses"):
        return f"The groups that used {tgt_phrase} were: {quoted}"
    if key == ("data component", "detects"):
        names = ", ".join(n for _, n in items)
        return (
            f"The following {len(items)} data components can be used to detect "
            f"{tgt_phrase}: {names}"
        )
    if key == ("mitigation strategy", "mitigates"):
        return (
            f"The following {len(items)} mitigations can be used to mitigate "
            f"{tgt_phrase}: {quoted}"
        )
    if key == ("campaign", "attributed-to"):
        return f"The campaigns attributed to {tgt_phrase} were: {quoted}"
    # Combination not shown in the source data; generic phrasing.
    plural = _GROUP_TAG[source_type].replace("_", " ")
    return f"The {plural} related to {tgt_phrase} via '{mapping_type}' are: {quoted}"


def build_relation_summary_docs(kb: KnowledgeBase) -> list[Document]:
    """One document per (subject entity, source category, mapping type) group,
    listing every related entity in ascending ID order, plus one
    tactics-used document per technique."""
    groups: dict[tuple[str, str, str], dict[str, Any]] = {}
    for rel in kb.relationships:
        key = (rel.target_id, rel.source_type, rel.mapping_type)
        entry = groups.setdefault(key, {"rel": rel, "items": set()})
        entry["items"].add((rel.source_id, rel.source_name))

    docs: list[Document] = []
    for (target_id, source_type, mapping_type) in sorted(groups):
        entry = groups[(target_id, source_type, mapping_type)]
        rel: Relationship = entry["rel"]
        subject = kb.entity(target_id)
        if subject is None:
            continue
        items = sorted(entry["items"])
        body = _summary_sentence(source_type, mapping_type, _target_phrase(rel), items)
        docs.append(
            make_document(
                header="",
                body=body,
                url=subject.url,
                source=f"relationships_{_GROUP_TAG[source_type]}_for_{rel.target_type}",
                subject_id=subject.id,
                subject_name=subject.name,
                subject_type=subject.category,
            )
        )

    for technique in kb.entities["techniques"]:
        tactics = technique.extras.get("tactics")
        if not tactics:
            continue
        bare = technique.extras.get("bare_name", technique.name)
        body = (
            f"Tactics used in attack technique {quoted_label(technique.id, bare)}: "
            + ", ".join(tactics)
        )
        docs.append(
            make_document(
                header="",
                body=body,
                url=technique.url,
                source="relationships_tactics_for_technique",
                subject_id=technique.id,
                subject_name=technique.name,
                subject_type="techniques",
            )
        )
    return docs


def build_corpus(kb: KnowledgeBase) -> tuple[list[Document], CorpusBuildReport]:
    """Assemble the full corpus: descriptions, per-relationship documents,
    then relation summaries, in a stable order."""
    report = CorpusBuildReport()
    docs: list[Document] = []
    for category in sorted(kb.entities):
        for entity in kb.entities[category]:
            if not entity.description:
                report.skipped_empty += 1
                continue
            docs.append(build_description_doc(entity))
            report.description_docs += 1
    for rel in kb.relationships:
        if not rel.mapping_description:
            report.skipped_empty += 1
            continue
        try:
            docs.append(build_relation_doc(rel, kb))
        except LookupError:
            report.skipped_unresolved_subject += 1
            continue
        report.relation_docs += 1
    summaries = build_relation_summary_docs(kb)
    docs.extend(summaries)
    report.summary_docs = len(summaries)
    return docs, report


def write_corpus(path: str | Path, corpus: Iterable[Document]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for doc in corpus:
            fh.write(json.dumps(doc.to_record(), ensure_ascii=False) + "\n")


def read_corpus(path: str | Path) -> list[Document]:
    docs = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                docs.append(Document.from_record(json.loads(line)))
    return docs


def corpus_stats(corpus: Iterable[Document], tokenizer: Tokenizer | None = None) -> CorpusStats:
    """Token-length statistics over full document texts."""
    tokenizer = tokenizer or default_tokenizer()
    lengths = [len(tokenizer.encode(doc.text)) for doc in corpus]
    if not lengths:
        raise ValueError("empty corpus")
    return CorpusStats(
        doc_count=len(lengths),
        max_tokens=max(lengths),
        min_tokens=min(lengths),
        mean_tokens=sum(lengths) / len(lengths),
        tokenizer=tokenizer.name,
    )
