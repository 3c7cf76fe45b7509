from __future__ import annotations

from pathlib import Path

import pytest

from attackqa.corpus import build_corpus
from attackqa.ingest import parse_bundle_file

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item.call_report = report


@pytest.fixture(scope="session")
def bundle_path() -> Path:
    return FIXTURES / "bundle.json"


@pytest.fixture(scope="session")
def kb(bundle_path):
    return parse_bundle_file(bundle_path)


@pytest.fixture(scope="session")
def corpus(kb):
    docs, _ = build_corpus(kb)
    return docs


@pytest.fixture(scope="session")
def docs_by_source(corpus):
    by: dict[str, list] = {}
    for doc in corpus:
        by.setdefault(doc.source, []).append(doc)
    return by


def find_doc(corpus, source: str, subject_id: str, relation_name: str | None = None):
    for doc in corpus:
        if doc.source == source and doc.subject_id == subject_id:
            if relation_name is None or doc.relation_name == relation_name:
                return doc
    raise LookupError(f"no document for {source}/{subject_id}")


@pytest.fixture(scope="session")
def t1539_context_docs(corpus):
    """The five T1539 documents in the order shown in the answer-prompt
    example: detects relation, data-component summary, software summary,
    tactics, description."""
    return [
        find_doc(corpus, "relationships_detects_data_component", "T1539", "Process Access"),
        find_doc(corpus, "relationships_data_components_for_technique", "T1539"),
        find_doc(corpus, "relationships_software_for_technique", "T1539"),
        find_doc(corpus, "relationships_tactics_for_technique", "T1539"),
        find_doc(corpus, "techniques", "T1539"),
    ]
