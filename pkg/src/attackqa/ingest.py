"""Parse MITRE ATT&CK source data into validated entity and relationship tables.

Two input paths are supported: a raw STIX 2.x JSON bundle, or a directory of
tabular exports (JSONL or CSV) with one file per entity category plus a
relationships file. Both produce the same :class:`KnowledgeBase`, and
:func:`export_tables` / :func:`load_tables` round-trip it losslessly.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

logger = logging.getLogger(__name__)

CATEGORIES = ("campaigns", "groups", "mitigations", "software", "tactics", "techniques")

SINGULAR = {
    "campaigns": "campaign",
    "groups": "group",
    "mitigations": "mitigation",
    "software": "software",
    "tactics": "tactic",
    "techniques": "technique",
}

MAPPING_TYPES = ("uses", "detects", "mitigates", "attributed-to")

SOURCE_TYPES = ("software", "group", "data component", "mitigation strategy", "campaign")
TARGET_TYPES = ("technique", "software", "group")

# STIX object type -> entity category
_STIX_CATEGORY = {
    "attack-pattern": "techniques",
    "x-mitre-tactic": "tactics",
    "malware": "software",
    "tool": "software",
    "intrusion-set": "groups",
    "campaign": "campaigns",
    "course-of-action": "mitigations",
}

# STIX object type -> relationship endpoint type label
_STIX_SOURCE_TYPE = {
    "malware": "software",
    "tool": "software",
    "intrusion-set": "group",
    "x-mitre-data-component": "data component",
    "course-of-action": "mitigation strategy",
    "campaign": "campaign",
}
_STIX_TARGET_TYPE = {
    "attack-pattern": "technique",
    "malware": "software",
    "tool": "software",
    "intrusion-set": "group",
}

# Optional per-entity metadata kept when present (aliases, platforms, ...).
_EXTRA_STIX_FIELDS = {
    "x_mitre_platforms": "platforms",
    "aliases": "aliases",
    "x_mitre_contributors": "contributors",
}

ATTACK_URL_PREFIX = "https://attack.mitre.org/"

ENTITY_COLUMNS = ("ID", "name", "description", "url")
RELATIONSHIP_COLUMNS = (
    "source ID",
    "source name",
    "source type",
    "mapping type",
    "target ID",
    "target name",
    "target type",
    "mapping description",
)


class BundleParseError(ValueError):
    """Raised when the STIX bundle bytes cannot be parsed."""


@dataclass(frozen=True)
class Entity:
    """One ATT&CK object: technique, tactic, software, group, campaign, or mitigation."""

    id: str
    name: str
    description: str
    url: str
    category: str
    extras: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Relationship:
    """Typed edge between two ATT&CK entities with a mapping description."""

    source_id: str
    source_name: str
    source_type: str
    mapping_type: str
    target_id: str
    target_name: str
    target_type: str
    mapping_description: str


@dataclass
class KnowledgeBase:
    """Entity tables (one per category) plus the relationships table."""

    entities: dict[str, list[Entity]] = field(
        default_factory=lambda: {c: [] for c in CATEGORIES}
    )
    relationships: list[Relationship] = field(default_factory=list)
    version: str = ""
    unresolved_endpoints: int = 0
    skipped_object_types: dict[str, int] = field(default_factory=dict)
    excluded_deprecated: int = 0

    def counts(self) -> dict[str, int]:
        out = {category: len(rows) for category, rows in self.entities.items()}
        out["relationships"] = len(self.relationships)
        return out

    def entity(self, attack_id: str) -> Entity | None:
        """Look up an entity by ATT&CK ID (cached; the KB is treated as
        immutable once queried)."""
        cache = self.__dict__.get("_id_cache")
        if cache is None:
            cache = {}
            for rows in self.entities.values():
                for ent in rows:
                    cache.setdefault(ent.id, ent)
            self.__dict__["_id_cache"] = cache
        return cache.get(attack_id)

    def sort(self) -> None:
        """Stable ordering: category, then ID lexicographic; relationships by full key."""
        for category in self.entities:
            self.entities[category].sort(key=lambda e: e.id)
        self.relationships.sort(
            key=lambda r: (
                r.source_id,
                r.source_name,
                r.mapping_type,
                r.target_id,
                r.mapping_description,
            )
        )


@dataclass(frozen=True)
class Finding:
    kind: str
    message: str
    subject: str = ""


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def by_kind(self, kind: str) -> list[Finding]:
        return [f for f in self.findings if f.kind == kind]


def _is_active(obj: dict) -> bool:
    return not obj.get("x_mitre_deprecated", False) and not obj.get("revoked", False)


def _attack_ref(obj: dict) -> tuple[str, str]:
    """ATT&CK ID and URL from the object's mitre-attack external reference."""
    for ref in obj.get("external_references", []):
        if ref.get("source_name") == "mitre-attack":
            return ref.get("external_id", ""), ref.get("url", "")
    return "", ""


def parse_bundle(raw: bytes | str) -> KnowledgeBase:
    """Parse a STIX 2.x JSON bundle into a KnowledgeBase.

    Non-deprecated, non-revoked objects of the mapped STIX types appear exactly
    once; unknown object types are skipped and counted; relationships whose
    endpoints cannot be resolved to a bundle object are counted in
    ``unresolved_endpoints``. Output ordering is deterministic (category, then
    ID), so identical bytes always produce an identical KnowledgeBase.
    """
    if isinstance(raw, bytes):
        text = raw.decode("utf-8")
    else:
        text = raw
    try:
        bundle = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BundleParseError(f"malformed JSON at byte offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(bundle, dict) or not isinstance(bundle.get("objects", []), list):
        raise BundleParseError("not a STIX bundle: missing 'objects' list")

    kb = KnowledgeBase()
    objects = bundle.get("objects", [])
    by_stix_id: dict[str, dict] = {}
    tactic_names: dict[str, str] = {}  # shortname -> display name

    for obj in objects:
        stix_id = obj.get("id")
        if stix_id:
            by_stix_id[stix_id] = obj
        if obj.get("type") == "x-mitre-collection":
            kb.version = str(obj.get("x_mitre_version", ""))
        if obj.get("type") == "x-mitre-tactic" and _is_active(obj):
            tactic_names[obj.get("x_mitre_shortname", "")] = obj.get("name", "")

    # Technique display names are parent-prefixed for sub-techniques, so build
    # an ID -> bare-name map first.
    bare_names: dict[str, str] = {}
    for obj in objects:
        if obj.get("type") == "attack-pattern" and _is_active(obj):
            attack_id, _ = _attack_ref(obj)
            if attack_id:
                bare_names[attack_id] = obj.get("name", "")

    for obj in objects:
        obj_type = obj.get("type", "")
        if obj_type in ("relationship", "x-mitre-collection"):
            continue
        category = _STIX_CATEGORY.get(obj_type)
        if category is None:
            if obj_type != "x-mitre-data-component":
                kb.skipped_object_types[obj_type] = kb.skipped_object_types.get(obj_type, 0) + 1
            continue
        if not _is_active(obj):
            kb.excluded_deprecated += 1
            continue
        attack_id, url = _attack_ref(obj)
        name = obj.get("name", "")
        extras: dict[str, Any] = {}
        for stix_key, extra_key in _EXTRA_STIX_FIELDS.items():
            if obj.get(stix_key):
                extras[extra_key] = obj[stix_key]
        if obj_type in ("malware", "tool"):
            extras["type"] = obj_type
        if obj_type == "attack-pattern":
            if obj.get("x_mitre_is_subtechnique") and "." in attack_id:
                parent_id = attack_id.split(".", 1)[0]
                extras["parent_id"] = parent_id
                extras["bare_name"] = name
                parent_name = bare_names.get(parent_id)
                if parent_name:
                    name = f"{parent_name}: {name}"
            tactics = [
                tactic_names[phase.get("phase_name", "")]
                for phase in obj.get("kill_chain_phases", [])
                if phase.get("kill_chain_name") == "mitre-attack"
                and phase.get("phase_name", "") in tactic_names
            ]
            if tactics:
                extras["tactics"] = tactics
        kb.entities[category].append(
            Entity(
                id=attack_id,
                name=name,
                description=obj.get("description", ""),
                url=url,
                category=category,
                extras=extras,
            )
        )

    for obj in objects:
        if obj.get("type") != "relationship":
            continue
        if not _is_active(obj):
            kb.excluded_deprecated += 1
            continue
        mapping_type = obj.get("relationship_type", "")
        if mapping_type not in MAPPING_TYPES:
            kb.skipped_object_types[f"relationship:{mapping_type}"] = (
                kb.skipped_object_types.get(f"relationship:{mapping_type}", 0) + 1
            )
            continue
        source = by_stix_id.get(obj.get("source_ref", ""))
        target = by_stix_id.get(obj.get("target_ref", ""))
        if source is None or target is None:
            kb.unresolved_endpoints += 1
            continue
        if not (_is_active(source) and _is_active(target)):
            kb.excluded_deprecated += 1
            continue
        source_type = _STIX_SOURCE_TYPE.get(source.get("type", ""))
        target_type = _STIX_TARGET_TYPE.get(target.get("type", ""))
        if source_type is None or target_type is None:
            kb.unresolved_endpoints += 1
            continue
        source_id, _ = _attack_ref(source)
        target_id, _ = _attack_ref(target)
        kb.relationships.append(
            Relationship(
                source_id=source_id,
                source_name=source.get("name", ""),
                source_type=source_type,
                mapping_type=mapping_type,
                target_id=target_id,
                target_name=target.get("name", ""),
                target_type=target_type,
                mapping_description=obj.get("description", ""),
            )
        )

    kb.sort()
    logger.info("parsed bundle: %s", kb.counts())
    return kb


def parse_bundle_file(path: str | Path) -> KnowledgeBase:
    return parse_bundle(Path(path).read_bytes())


def validate(kb: KnowledgeBase) -> ValidationReport:
    """Report duplicate IDs, empty descriptions, unresolvable relationship
    endpoints, and malformed URLs. The knowledge base is not modified."""
    report = ValidationReport()
    known_ids: set[str] = set()
    for category in CATEGORIES:
        seen: set[str] = set()
        for entity in kb.entities[category]:
            if not entity.id:
                report.findings.append(Finding("empty id", f"{category} entity with no ID", entity.name))
            elif entity.id in seen:
                report.findings.append(
                    Finding("duplicate id", f"duplicate ID {entity.id!r} in {category}", entity.id)
                )
            seen.add(entity.id)
            known_ids.add(entity.id)
            if not entity.description:
                report.findings.append(
                    Finding("empty description", f"{entity.id or entity.name} has an empty description", entity.id)
                )
            if not entity.url or not entity.url.startswith(ATTACK_URL_PREFIX):
                report.findings.append(
                    Finding("malformed url", f"{entity.id or entity.name} url {entity.url!r}", entity.id)
                )
    for rel in kb.relationships:
        # Data components carry no ATT&CK ID; an empty endpoint ID names nothing.
        for endpoint, label in ((rel.source_id, "source"), (rel.target_id, "target")):
            if endpoint and endpoint not in known_ids:
                report.findings.append(
                    Finding(
                        "unresolvable endpoint",
                        f"relationship {label} {endpoint!r} matches no entity",
                        endpoint,
                    )
                )
    if kb.unresolved_endpoints:
        report.findings.append(
            Finding(
                "unresolvable endpoint",
                f"{kb.unresolved_endpoints} relationship endpoint(s) were unresolvable at parse time",
            )
        )
    return report


def _entity_record(entity: Entity) -> dict[str, Any]:
    record: dict[str, Any] = {
        "ID": entity.id,
        "name": entity.name,
        "description": entity.description,
        "url": entity.url,
    }
    record.update(entity.extras)
    return record


def _relationship_record(rel: Relationship) -> dict[str, str]:
    return {
        "source ID": rel.source_id,
        "source name": rel.source_name,
        "source type": rel.source_type,
        "mapping type": rel.mapping_type,
        "target ID": rel.target_id,
        "target name": rel.target_name,
        "target type": rel.target_type,
        "mapping description": rel.mapping_description,
    }


def export_tables(kb: KnowledgeBase, directory: str | Path) -> list[Path]:
    """Write the canonical tabular export: one JSONL file per category, a
    relationships JSONL, and a manifest with version and counts."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for category in CATEGORIES:
        path = directory / f"{category}.jsonl"
        with path.open("w", encoding="utf-8") as fh:
            for entity in kb.entities[category]:
                fh.write(json.dumps(_entity_record(entity), ensure_ascii=False) + "\n")
        written.append(path)
    rel_path = directory / "relationships.jsonl"
    with rel_path.open("w", encoding="utf-8") as fh:
        for rel in kb.relationships:
            fh.write(json.dumps(_relationship_record(rel), ensure_ascii=False) + "\n")
    written.append(rel_path)
    manifest = directory / "manifest.json"
    manifest.write_text(
        json.dumps(
            {
                "version": kb.version,
                "counts": kb.counts(),
                "unresolved_endpoints": kb.unresolved_endpoints,
                "excluded_deprecated": kb.excluded_deprecated,
                "skipped_object_types": kb.skipped_object_types,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    written.append(manifest)
    return written


def _read_records(path: Path) -> Iterable[dict[str, Any]]:
    if path.suffix == ".csv":
        with path.open(newline="", encoding="utf-8") as fh:
            yield from csv.DictReader(fh)
    else:
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)


def _normalize_source_type(value: str) -> str:
    # Tabular exports sometimes say "mitigation" for the mitigation-strategy
    # source type; accept both spellings.
    return "mitigation strategy" if value == "mitigation" else value


def load_tables(directory: str | Path) -> KnowledgeBase:
    """Load a KnowledgeBase from a directory of tabular files.

    Expects ``<category>.jsonl`` (or ``.csv``) for each of the six categories
    plus ``relationships.jsonl``/``.csv``, with the entity columns
    (ID, name, description, url, ...) and the relationship columns
    (source ID, source name, source type, mapping type, target ID,
    target name, target type, mapping description).
    """
    directory = Path(directory)
    kb = KnowledgeBase()
    for category in CATEGORIES:
        path = directory / f"{category}.jsonl"
        if not path.exists():
            path = directory / f"{category}.csv"
        if not path.exists():
            continue
        for record in _read_records(path):
            extras = {
                key: value
                for key, value in record.items()
                if key not in ENTITY_COLUMNS and value not in (None, "")
            }
            kb.entities[category].append(
                Entity(
                    id=record.get("ID", ""),
                    name=record.get("name", ""),
                    description=record.get("description", "") or "",
                    url=record.get("url", ""),
                    category=category,
                    extras=extras,
                )
            )
    rel_path = directory / "relationships.jsonl"
    if not rel_path.exists():
        rel_path = directory / "relationships.csv"
    if rel_path.exists():
        for record in _read_records(rel_path):
            kb.relationships.append(
                Relationship(
                    source_id=record.get("source ID", ""),
                    source_name=record.get("source name", ""),
                    source_type=_normalize_source_type(record.get("source type", "")),
                    mapping_type=record.get("mapping type", ""),
                    target_id=record.get("target ID", ""),
                    target_name=record.get("target name", ""),
                    target_type=record.get("target type", ""),
                    mapping_description=record.get("mapping description", "") or "",
                )
            )
    manifest = directory / "manifest.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text(encoding="utf-8"))
        kb.version = meta.get("version", "")
        kb.unresolved_endpoints = int(meta.get("unresolved_endpoints", 0))
        kb.excluded_deprecated = int(meta.get("excluded_deprecated", 0))
        kb.skipped_object_types = dict(meta.get("skipped_object_types", {}))
    kb.sort()
    return kb
