from __future__ import annotations

import json
import random

import pytest

from attackqa.corpus import make_document
from attackqa.datasets import (
    are_related,
    build_embedding_dataset,
    build_generation_dataset,
    build_refusal_examples,
    completion_json,
    dataset_summary,
    read_rows,
    reference_urls,
    split_train_eval,
    write_rows,
)
from attackqa.gateway import EmbeddingClient, EndpointConfig, MockEmbeddingBackend
from attackqa.ingest import KnowledgeBase
from attackqa.qa_gen import QAPair
from attackqa.retrieval import build_index
from attackqa.service import REFUSAL_SENTINEL

from conftest import find_doc


def _pair(question, document, thought="To answer the question, I need x", answer="a",
          url="https://attack.mitre.org/techniques/T1", references=None,
          human=(True, True)):
    return QAPair(
        question=question, thought=thought, answer=answer, document=document,
        subject_id="T1", subject_name="n", subject_type="techniques", url=url,
        source="techniques", references=references,
        human_question=human[0], human_answer=human[1],
    )


def synthetic_dataset(n_pairs: int, n_docs: int, seed: int = 0):
    """n_pairs over n_docs documents, documents cycled so most have several pairs."""
    rng = random.Random(seed)
    docs = [f"Document body number {i}" for i in range(n_docs)]
    return [
        _pair(f"question {i} ({rng.randrange(10**6)})", docs[i % n_docs])
        for i in range(n_pairs)
    ]


class TestSplit:
    def test_deterministic(self):
        dataset = synthetic_dataset(200, 40)
        a = split_train_eval(dataset, seed=9)
        b = split_train_eval(dataset, seed=9)
        assert [p.question for p in a.train] == [p.question for p in b.train]
        assert [p.question for p in a.eval] == [p.question for p in b.eval]

    def test_all_documents_in_train_and_size_kept(self):
        dataset = synthetic_dataset(300, 90, seed=4)
        split = split_train_eval(dataset, seed=11)
        assert {p.document for p in dataset} == {p.document for p in split.train}
        assert abs(len(split.eval) - round(0.10 * len(dataset))) <= 1
        train_questions = {p.question for p in split.train}
        assert not train_questions & {p.question for p in split.eval}

    def test_single_pair_documents_shrink_eval(self):
        # every document has exactly one pair: repair cannot swap, so eval
        # shrinks and the conflict is reported
        dataset = [_pair(f"q{i}", f"unique doc {i}") for i in range(10)]
        split = split_train_eval(dataset, seed=1)
        assert {p.document for p in split.train} == {p.document for p in dataset}
        assert len(split.eval) == 0
        assert split.conflicts == 1  # 10 pairs -> 1 eval slot, shrunk back

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="dataset too small"):
            split_train_eval(synthetic_dataset(9, 3), seed=0)


class TestAreRelated:
    @pytest.fixture()
    def fixture_docs(self, corpus):
        return {doc.doc_id: doc for doc in corpus}

    def test_sibling_subtechniques_related(self, corpus, kb):
        a = find_doc(corpus, "techniques", "T1562.001")
        b = find_doc(corpus, "techniques", "T1562.002")
        assert are_related(a, b, kb)

    def test_parent_related(self, corpus, kb):
        a = find_doc(corpus, "techniques", "T1562.001")
        parent = find_doc(corpus, "techniques", "T1562")
        assert are_related(a, parent, kb)

    def test_reflexive(self, corpus, kb):
        doc = find_doc(corpus, "techniques", "T1562.001")
        assert are_related(doc, doc, kb)

    def test_subject_vs_relation(self, corpus, kb):
        relation_doc = find_doc(corpus, "relationships_uses_software", "T1123")  # relation S0467
        tajmahal_desc = find_doc(corpus, "software", "S0467")
        assert are_related(relation_doc, tajmahal_desc, kb)

    def test_directly_linked_subjects(self, corpus, kb):
        mitigation = find_doc(corpus, "mitigations", "M1036")
        technique = find_doc(corpus, "techniques", "T1110")
        assert are_related(mitigation, technique, kb)  # M1036 mitigates T1110

    def test_unrelated_verified_by_exhaustive_scan(self, corpus, kb):
        a = find_doc(corpus, "mitigations", "M1036")
        b = find_doc(corpus, "techniques", "T1123")
        for rel in kb.relationships:
            assert {rel.source_id, rel.target_id} != {"M1036", "T1123"}
        assert a.subject_id.split(".")[0] != b.subject_id.split(".")[0]
        assert not are_related(a, b, kb)


def _emb_client(dim=16, oracle=None, overrides=None):
    cfg = EndpointConfig(base_url="mock", model="mock-emb", dimension=dim, backoff_base=0.0)
    return EmbeddingClient(cfg, backend=MockEmbeddingBackend(dim, oracle=oracle, overrides=overrides))


class TestEmbeddingDataset:
    def test_no_related_negatives_on_fixture(self, corpus, kb):
        by_text = {d.text: d for d in corpus}
        pairs = [
            _pair("q1", find_doc(corpus, "techniques", "T1562.001").text),
            _pair("q2", find_doc(corpus, "relationships_uses_software", "T1123").text),
        ]
        rows, report = build_embedding_dataset(pairs, corpus, kb, n_neg=7, seed=3)
        assert report.rows == 2
        for row in rows:
            positive = by_text[row.positive_docs[0]]
            for negative_text in row.negative_docs:
                negative = by_text[negative_text]
                assert not are_related(negative, positive, kb)

    def test_no_sibling_base_id_negative(self, corpus, kb):
        pair = _pair("q", find_doc(corpus, "techniques", "T1562.001").text)
        by_text = {d.text: d for d in corpus}
        for seed in range(10):
            rows, _ = build_embedding_dataset([pair], corpus, kb, n_neg=7, seed=seed)
            for negative_text in rows[0].negative_docs:
                assert not by_text[negative_text].subject_id.startswith("T1562")

    def test_zero_negatives_allowed(self, corpus, kb):
        pair = _pair("q", corpus[0].text)
        rows, _ = build_embedding_dataset([pair], corpus, kb, n_neg=0)
        assert rows[0].negative_docs == []
        assert rows[0].positive_docs == [corpus[0].text]

    def test_small_pool_exhausts(self, kb):
        # five docs: positive + three related (same base id / direct link) + one eligible
        docs = [
            make_document(header="", body=f"body {i}", url="https://attack.mitre.org/x",
                          source="techniques", subject_id=subject, subject_name="n",
                          subject_type="techniques")
            for i, subject in enumerate(["T9000.001", "T9000.002", "T9000", "T9000.003", "T7777"])
        ]
        empty_kb = KnowledgeBase()
        pair = _pair("q", docs[0].text)
        rows, report = build_embedding_dataset([pair], docs, empty_kb, n_neg=7, seed=0)
        assert rows[0].negative_docs == [docs[4].text]
        assert report.short_pools == 1


class TestGenerationDataset:
    @pytest.fixture()
    def indexed_fixture(self, corpus):
        client = _emb_client()
        return build_index(corpus, client), client

    def test_golden_present_without_replacement(self, corpus, kb):
        docs = corpus[:20]
        pair_doc = docs[5]
        pair = _pair("q about five", pair_doc.text)
        oracle = {"q about five": pair_doc.text}
        client = _emb_client(oracle=oracle)
        index = build_index(docs, client)
        rows, report = build_generation_dataset([pair], index, client, k=5, seed=2)
        assert report.golden_injected == 0
        assert rows[0].contains_golden and 1 <= rows[0].golden_rank <= 5
        assert pair_doc.text in rows[0].prompt

    def test_golden_injected_when_absent(self, corpus, indexed_fixture):
        index, client = indexed_fixture
        # hash embeddings make a random question unlikely to retrieve a named doc;
        # force a miss with an anti-aligned query vector
        target = corpus[10]
        overrides = {"miss question": -MockEmbeddingBackend(16).vector(target.text)}
        client = _emb_client(overrides=overrides)
        rows, report = build_generation_dataset(
            [_pair("miss question", target.text)], index, client, k=5, seed=2
        )
        assert report.golden_injected == 1
        assert rows[0].contains_golden
        assert target.text in rows[0].prompt

    def test_reference_urls_reduced_from_sources(self):
        pair = _pair(
            "q", "d",
            references=[
                {"source": "T1539/Process Access: https://attack.mitre.org/techniques/T1539",
                 "citation": "c1"},
                {"source": "T1539/Process Access: https://attack.mitre.org/techniques/T1539",
                 "citation": "c2"},
            ],
            human=(False, False),
        )
        assert reference_urls(pair) == ["https://attack.mitre.org/techniques/T1539"]
        payload = json.loads(completion_json(pair))
        assert payload == {
            "thought": "To answer the question, I need x",
            "answer": "a",
            "references": ["https://attack.mitre.org/techniques/T1539"],
        }

    def test_heuristic_pairs_cite_their_own_url(self):
        pair = _pair("q", "d", url="https://attack.mitre.org/techniques/T1562/001")
        assert reference_urls(pair) == ["https://attack.mitre.org/techniques/T1562/001"]


class TestRefusalExamples:
    def _misses(self, n_eligible, n_hits, corpus, seed=0):
        docs = corpus[:30]
        backend = MockEmbeddingBackend(16)
        overrides = {}
        pairs = []
        for i in range(n_eligible + n_hits):
            target = docs[i % len(docs)]
            question = f"refusal q {i}"
            pairs.append(_pair(question, target.text, thought=f"To answer the question, I need {i}"))
            if i < n_hits:
                overrides[question] = backend.vector(target.text)
            else:
                overrides[question] = -backend.vector(target.text)
        client = _emb_client(overrides=overrides)
        index = build_index(docs, client)
        return pairs, index, client

    def test_ratio_equation(self, corpus):
        pairs, index, client = self._misses(n_eligible=150, n_hits=0, corpus=corpus)
        rows, report = build_refusal_examples(
            pairs, index, client, k=5, base_count=700, target_ratio=0.125, seed=1
        )
        assert report.target == 100  # 100 / (700 + 100) = 1/8
        assert report.rows == 100

    def test_zero_ratio_yields_nothing(self, corpus):
        pairs, index, client = self._misses(5, 0, corpus)
        rows, report = build_refusal_examples(
            pairs, index, client, k=5, base_count=100, target_ratio=0.0
        )
        assert rows == [] and report.rows == 0

    def test_refusal_purity(self, corpus):
        pairs, index, client = self._misses(n_eligible=20, n_hits=5, corpus=corpus)
        rows, report = build_refusal_examples(
            pairs, index, client, k=5, base_count=56, target_ratio=0.125, seed=3
        )
        assert report.eligible == 20
        assert report.target == 8 and report.rows == 8
        for row in rows:
            payload = json.loads(row.completion)
            assert payload["answer"] == REFUSAL_SENTINEL
            assert payload["references"] == []
            assert not row.contains_golden and row.golden_rank is None
        # eligible pool was only the misses
        questions_in_rows = {json.loads(r.completion)["thought"] for r in rows}
        hit_thoughts = {p.thought for p in pairs[:5]}
        assert not questions_in_rows & hit_thoughts

    def test_pool_exhaustion_warns_and_caps(self, corpus):
        pairs, index, client = self._misses(n_eligible=3, n_hits=0, corpus=corpus)
        rows, report = build_refusal_examples(
            pairs, index, client, k=5, base_count=700, target_ratio=0.125
        )
        assert report.target == 100 and report.rows == 3


class TestDatasetSummary:
    def test_empty_dataset(self):
        summary = dataset_summary([])
        assert summary.total_pairs == 0
        assert summary.unique_documents == 0
        assert summary.max_doc_tokens is None and summary.mean_doc_tokens is None

    def test_ten_known_rows_tallied_by_hand(self):
        pairs = (
            [_pair(f"hh{i}", "doc a", human=(True, True)) for i in range(2)]
            + [_pair(f"hl{i}", "doc b", human=(True, False)) for i in range(5)]
            + [_pair(f"ll{i}", "doc c", human=(False, False)) for i in range(3)]
        )
        summary = dataset_summary(pairs)
        assert summary.total_pairs == 10
        assert summary.mode_counts == {"summary": 2, "templated": 5, "free": 3}
        assert summary.mode_percentages == {"summary": 20.0, "templated": 50.0, "free": 30.0}
        assert summary.unique_documents == 3


class TestRowIO:
    def test_meta_header_round_trip(self, tmp_path):
        path = tmp_path / "rows.jsonl"
        rows = [{"a": 1}, {"a": 2}]
        write_rows(path, rows, meta={"seed": 3, "k": 5})
        loaded, meta = read_rows(path)
        assert loaded == rows and meta == {"seed": 3, "k": 5}
