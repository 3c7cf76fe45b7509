from __future__ import annotations

import json
import random
import re

import pytest

from attackqa.evaluation import (
    EvalRecord,
    aggregate,
    build_judge_prompt,
    judge_answer,
    read_eval_records,
    reference_correct,
    run_eval,
    score_record,
    write_eval_records,
)
from attackqa.gateway import (
    ChatClient,
    EmbeddingClient,
    EndpointConfig,
    MockChatBackend,
    MockEmbeddingBackend,
)
from attackqa.qa_gen import QAPair
from attackqa.retrieval import build_index
from attackqa.service import REFUSAL_SENTINEL

GOLDEN_URL = "https://attack.mitre.org/techniques/T1539"


def _record(**kwargs):
    defaults = dict(
        question="q", true_answer="t", golden_url=GOLDEN_URL, golden_rank=1,
        golden_hit=True, parse_ok=True, refusal=False,
        references=[GOLDEN_URL],
    )
    defaults.update(kwargs)
    return EvalRecord(**defaults)


class TestReferenceCorrect:
    def test_exact_member(self):
        assert reference_correct(_record(references=[GOLDEN_URL]))

    def test_trailing_slash_variant_fails(self):
        assert not reference_correct(_record(references=[GOLDEN_URL + "/"]))

    def test_empty_references_fail(self):
        assert not reference_correct(_record(references=[]))

    def test_unparsed_record_fails(self):
        assert not reference_correct(_record(parse_ok=False, references=[GOLDEN_URL]))


def _judge(script=()):
    cfg = EndpointConfig(base_url="mock", model="mock-judge", backoff_base=0.0)
    return ChatClient(cfg, backend=MockChatBackend(script))


class TestJudgeAnswer:
    def test_exact_match_pattern(self):
        prompt = build_judge_prompt("q", "same", "same")
        judge = _judge([{
            "prompt": prompt,
            "response": '{"score": 10, "reason": "matches the expected output exactly"}',
        }])
        assert judge_answer("q", "same", "same", judge) == (
            1.0, "matches the expected output exactly"
        )

    def test_extra_detail_pattern(self):
        prompt = build_judge_prompt("q", "core", "core plus extra detail")
        judge = _judge([{
            "prompt": prompt,
            "response": '{"score": 8, "reason": "extra information not in the expected output"}',
        }])
        score, _ = judge_answer("q", "core", "core plus extra detail", judge)
        assert score == pytest.approx(0.8)

    def test_refusal_vs_substantive_pattern(self):
        prompt = build_judge_prompt("q", "real answer", REFUSAL_SENTINEL)
        judge = _judge([{
            "prompt": prompt,
            "response": '{"score": 0, "reason": "does not provide any relevant information"}',
        }])
        score, _ = judge_answer("q", "real answer", REFUSAL_SENTINEL, judge)
        assert score == 0.0

    def test_unparseable_grade_is_null(self):
        prompt = build_judge_prompt("q", "t", "g")
        judge = _judge([{"prompt": prompt, "response": "pretty good I think"}])
        score, reason = judge_answer("q", "t", "g", judge)
        assert score is None and reason == "unparseable grade"

    def test_prompt_embeds_criteria(self):
        prompt = build_judge_prompt("q", "t", "g")
        assert "contradicts the true answer" in prompt
        assert "omits details from the true answer" in prompt
        assert "irrelevant details that are not present in the true answer" in prompt


class TestScoreRecord:
    @pytest.mark.parametrize("judge_score", [0.0, 0.8, 1.0])
    def test_all_hit_miss_refusal_combinations(self, judge_score):
        for hit in (True, False):
            for refusal in (True, False):
                record = _record(golden_hit=hit, refusal=refusal, judge_score=judge_score)
                soft, hard = score_record(record)
                assert hard == judge_score
                if not hit and refusal:
                    assert soft == 1.0
                else:
                    assert soft == judge_score

    def test_miss_and_refusal_overrides_zero_judge(self):
        soft, hard = score_record(_record(golden_hit=False, refusal=True, judge_score=0.0))
        assert (soft, hard) == (1.0, 0.0)

    def test_miss_with_hallucination_keeps_judge_zero(self):
        soft, hard = score_record(_record(golden_hit=False, refusal=False, judge_score=0.0))
        assert (soft, hard) == (0.0, 0.0)

    def test_hit_passthrough(self):
        soft, hard = score_record(_record(golden_hit=True, refusal=False, judge_score=0.8))
        assert (soft, hard) == (0.8, 0.8)

    def test_soft_never_below_hard_randomized(self):
        rng = random.Random(17)
        for _ in range(300):
            record = _record(
                golden_hit=rng.random() < 0.5,
                refusal=rng.random() < 0.5,
                judge_score=rng.choice([0.0, 0.3, 0.8, 1.0]),
            )
            soft, hard = score_record(record)
            assert soft >= hard


def _pair(question, document, answer="true answer", url=GOLDEN_URL):
    return QAPair(
        question=question, thought="To answer the question, I need x", answer=answer,
        document=document, subject_id="T1539", subject_name="n", subject_type="techniques",
        url=url, source="techniques", references=None,
        human_question=True, human_answer=True,
    )


def _emb(overrides=None, oracle=None, dim=16):
    cfg = EndpointConfig(base_url="mock", model="mock-emb", dimension=dim, backoff_base=0.0)
    return EmbeddingClient(cfg, backend=MockEmbeddingBackend(dim, oracle=oracle, overrides=overrides))


class TestRunEvalCeiling:
    def test_all_mock_oracle_configuration_scores_100(self, corpus):
        pairs = [_pair(f"q {i}?", corpus[i].text, url=corpus[i].url) for i in range(10)]
        oracle = {p.question: p.document for p in pairs}
        embedder = _emb(oracle=oracle)
        index = build_index(corpus, embedder)
        generator = ChatClient(
            EndpointConfig(base_url="mock", model="mock-gen", backoff_base=0.0),
            backend=MockChatBackend(),
        )
        report, records = run_eval(pairs, index, embedder, generator, _judge(), k=5)
        assert report.recall == {1: 100.0, 5: 100.0, 10: 100.0}
        assert report.parse_success_pct == 100.0
        assert report.correct_reference_pct == 100.0
        assert report.soft_correctness_pct == 100.0
        assert report.hard_correctness_pct == 100.0
        assert report.judge_nulls == 0
        assert len(records) == 10


class _ScriptedGenerator:
    """Answers per question, sniffing the prompt's final Question line."""

    def __init__(self, answers: dict[str, str]):
        self.answers = answers

    def send(self, prompt, cfg, **kwargs):
        question = re.findall(r"Question: (.+)", prompt)[-1].strip()
        return self.answers[question]


class _ScriptedJudge:
    def __init__(self, scores: dict[str, int]):
        self.scores = scores

    def send(self, prompt, cfg, **kwargs):
        question = re.search(r"Question: (.+)", prompt).group(1).strip()
        return json.dumps({"score": self.scores[question], "reason": "scripted"})


class TestRunEvalHandAggregated:
    """Ten records: 7 hits / 3 misses, 2 parse failures, 2 of the misses
    refuse, judge scores hand-assigned. The expected report row below is a
    by-hand aggregation."""

    def _setup(self, corpus):
        docs = corpus[:30]
        backend = MockEmbeddingBackend(16)
        pairs, overrides, answers, scores = [], {}, {}, {}

        def ok(i):
            return json.dumps({
                "thought": "To answer the question, I need x",
                "answer": f"answer {i}",
                "references": [docs[i].url],
            })

        for i in range(10):
            question = f"scripted question {i}?"
            pairs.append(_pair(question, docs[i].text, url=docs[i].url))
            hit = i < 7
            overrides[question] = (
                backend.vector(docs[i].text) if hit else -backend.vector(docs[i].text)
            )
            if i in (0, 1):  # parse failures (hits)
                answers[question] = "not json at all"
            elif i in (7, 8):  # misses that refuse
                answers[question] = json.dumps({
                    "thought": "To answer the question, I need more",
                    "answer": REFUSAL_SENTINEL,
                    "references": [],
                })
            elif i == 9:  # miss that hallucinates, judged 0
                answers[question] = ok(i)
            else:  # hits 2..6, judged 10,10,8,6,0
                answers[question] = ok(i)
        scores = {
            "scripted question 2?": 10,
            "scripted question 3?": 10,
            "scripted question 4?": 8,
            "scripted question 5?": 6,
            "scripted question 6?": 0,
            "scripted question 7?": 0,
            "scripted question 8?": 0,
            "scripted question 9?": 0,
        }
        embedder = _emb(overrides=overrides)
        index = build_index(docs, embedder)
        generator = ChatClient(
            EndpointConfig(base_url="mock", model="gen", backoff_base=0.0),
            backend=_ScriptedGenerator(answers),
        )
        judge = ChatClient(
            EndpointConfig(base_url="mock", model="judge", backoff_base=0.0),
            backend=_ScriptedJudge(scores),
        )
        return pairs, index, embedder, generator, judge

    def test_report_matches_hand_computation(self, corpus):
        pairs, index, embedder, generator, judge = self._setup(corpus)
        report, records = run_eval(pairs, index, embedder, generator, judge, k=5)
        # hits: questions 0..6 -> recall@5 = 7/10
        assert report.recall[5] == pytest.approx(70.0)
        # parse failures: 0, 1 -> 8/10 parsed
        assert report.parse_success_pct == pytest.approx(80.0)
        # parsed records 2..9; references correct for 2..6 and 9 (own url),
        # refusals 7, 8 have empty references -> 6/8
        assert report.correct_reference_pct == pytest.approx(75.0)
        # hard: parse failures 0; 2..6 = 1.0, 1.0, .8, .6, 0; 7,8 refusal judged 0;
        # 9 hallucination 0 -> sum 3.4 over 10
        assert report.hard_correctness_pct == pytest.approx(34.0)
        # soft: same except misses-with-refusal 7, 8 become 1.0 -> sum 5.4
        assert report.soft_correctness_pct == pytest.approx(54.0)
        assert report.judge_nulls == 0

    def test_persisted_records_reproduce_report(self, corpus, tmp_path):
        pairs, index, embedder, generator, judge = self._setup(corpus)
        report, records = run_eval(pairs, index, embedder, generator, judge, k=5)
        path = tmp_path / "records.jsonl"
        write_eval_records(path, records)
        reloaded = read_eval_records(path)
        recomputed = aggregate(
            reloaded, k=5, recall_ks=(1, 5, 10),
            embedding_model=report.embedding_model,
            generator_model=report.generator_model,
            judge_model=report.judge_model,
        )
        assert recomputed.to_dict() == report.to_dict()

    def test_markdown_report_shape(self, corpus):
        pairs, index, embedder, generator, judge = self._setup(corpus)
        report, _ = run_eval(pairs, index, embedder, generator, judge, k=5)
        markdown = report.to_markdown()
        assert "% Context Recall at k=5" in markdown
        assert "% Answer parsing success" in markdown
        assert "% Correct reference" in markdown
        assert "% Mean Correctness (soft)" in markdown
        assert "% Mean Correctness (hard)" in markdown


class TestEdgeCases:
    def test_empty_eval_set_rejected(self, corpus):
        embedder = _emb()
        index = build_index(corpus[:5], embedder)
        with pytest.raises(ValueError, match="empty evaluation set"):
            run_eval([], index, embedder, None, None)

    def test_judge_transport_failure_leaves_null_scores(self, corpus):
        docs = corpus[:10]
        pair = _pair("q?", docs[0].text, url=docs[0].url)
        embedder = _emb(oracle={"q?": docs[0].text})
        index = build_index(docs, embedder)
        generator = ChatClient(
            EndpointConfig(base_url="mock", model="g", backoff_base=0.0),
            backend=MockChatBackend(),
        )
        class _Dead:
            def send(self, prompt, cfg, **kwargs):
                from attackqa.gateway import _BackendFailure
                raise _BackendFailure("down", retryable=False)
        judge = ChatClient(
            EndpointConfig(base_url="mock", model="j", backoff_base=0.0, max_retries=0),
            backend=_Dead(),
        )
        report, records = run_eval([pair], index, embedder, generator, judge, k=5)
        assert records[0].judge_score is None
        assert records[0].soft_score is None and records[0].hard_score is None
        assert report.judge_nulls == 1
        assert report.soft_correctness_pct is None
