"""Executor fan-out, coordination, decoding-parameter mapping, and the
scripted mock backend."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pytest

from latentscout.agents import (
    DecodingParams,
    DecodingRanges,
    FanOutItem,
    MockBackend,
    MockReply,
    aggregate,
    build_aggregation_prompt,
    build_query,
    decode_params,
    fan_out,
    parse_hypothesis_text,
    query_key,
    seeded_embedding,
)
from latentscout.belief import PromptEmbedding
from latentscout.errors import (
    BackendError,
    ConfigurationError,
    FixtureError,
    UsageError,
)
from latentscout.graph import latent_queries, parse_graph
from latentscout.rewards import AnswerRecord


def test_decode_center_action() -> None:
    params = decode_params(PromptEmbedding(0.5, 0.5))
    assert params.temperature == pytest.approx(1.0)
    assert params.repetition_penalty == pytest.approx(1.5)


def test_decode_grid_floor() -> None:
    params = decode_params(PromptEmbedding(0.05, 0.95))
    assert params.temperature == pytest.approx(0.1)
    assert params.repetition_penalty == pytest.approx(1.95)


def test_decode_custom_range() -> None:
    ranges = DecodingRanges(temperature_low=0.2, temperature_high=1.2)
    params = decode_params(PromptEmbedding(0.5, 0.5), ranges)
    assert params.temperature == pytest.approx(0.7)


def test_ranges_validation() -> None:
    with pytest.raises(ConfigurationError):
        DecodingRanges(temperature_low=1.0, temperature_high=1.0)
    with pytest.raises(ConfigurationError):
        DecodingRanges(penalty_high=1.0)


def test_seeded_embedding_deterministic_unit_norm() -> None:
    a = seeded_embedding("chronic stress response", 7)
    b = seeded_embedding("chronic stress response", 7)
    np.testing.assert_array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)
    assert not np.array_equal(a, seeded_embedding("chronic stress response", 8))


def test_seeded_embedding_case_insensitive() -> None:
    np.testing.assert_array_equal(seeded_embedding("Tar Deposits", 3),
                                  seeded_embedding("tar deposits", 3))


def test_seeded_embedding_empty_text_is_zero() -> None:
    assert np.linalg.norm(seeded_embedding("", 1)) == 0.0


GRAPH_DOC = json.dumps({
    "variables": [
        {"id": "S", "kind": "observed", "name": "smoking"},
        {"id": "C", "kind": "observed", "name": "cough"},
        {"id": "L", "kind": "latent"},
    ],
    "edges": [{"from": "S", "to": "L"}, {"from": "L", "to": "C"}],
})


def test_build_query_names_structure() -> None:
    graph = parse_graph(GRAPH_DOC)
    (latent, blanket), = latent_queries(graph)
    text = build_query(latent, blanket, graph, domain="epidemiology")
    assert "epidemiology" in text
    assert "Direct causes: smoking." in text
    assert "Direct effects: cough." in text
    assert "smoking -> L" in text
    assert "L -> cough" in text
    assert text.splitlines()[-1].startswith("Task:")


def test_build_query_isolated_latent() -> None:
    graph = parse_graph(json.dumps({
        "variables": [{"id": "L", "kind": "latent"}], "edges": []}))
    (latent, blanket), = latent_queries(graph)
    text = build_query(latent, blanket, graph)
    assert "no observed neighbors" in text


def test_build_query_deterministic_and_digest_appended() -> None:
    graph = parse_graph(GRAPH_DOC)
    (latent, blanket), = latent_queries(graph)
    assert build_query(latent, blanket, graph) == build_query(latent, blanket, graph)
    with_digest = build_query(latent, blanket, graph,
                              evidence_digest="e1: supported")
    assert "e1: supported" in with_digest


def test_build_query_checks_blanket_owner() -> None:
    graph = parse_graph(GRAPH_DOC)
    (latent, blanket), = latent_queries(graph)
    from latentscout.graph import MarkovBlanket
    wrong = MarkovBlanket(target="S", members=frozenset())
    with pytest.raises(UsageError):
        build_query(latent, wrong, graph)


class ScriptedBackend:
    """Minimal in-test executor: fixed reply, optional delay or failure."""

    def __init__(self, identity: str, text: str, confidence: float = 0.8,
                 delay: float = 0.0, fail: bool = False):
        self.identity = identity
        self.text = text
        self.confidence = confidence
        self.delay = delay
        self.fail = fail
        self.seen_params: Tuple[DecodingParams, ...] = ()

    def embed(self, text: str) -> np.ndarray:
        return seeded_embedding(text, 0)

    def generate(self, query: str, params: DecodingParams) -> AnswerRecord:
        self.seen_params = self.seen_params + (params,)
        if self.delay:
            time.sleep(self.delay)
        if self.fail:
            raise BackendError(f"{self.identity} scripted failure")
        return AnswerRecord(text=self.text, embedding=self.embed(self.text),
                            confidence=self.confidence)


def center(n: int):
    return [PromptEmbedding(0.5, 0.5)] * n


def test_fan_out_sorts_by_identity() -> None:
    backends = [ScriptedBackend("zeta", "z answer"),
                ScriptedBackend("alpha", "a answer")]
    items = fan_out("q", backends, center(2))
    assert [i.identity for i in items] == ["alpha", "zeta"]
    assert items[0].answer.text == "a answer"


def test_fan_out_per_executor_actions() -> None:
    backends = [ScriptedBackend("a", "x"), ScriptedBackend("b", "y")]
    actions = [PromptEmbedding(0.25, 0.5), PromptEmbedding(0.75, 0.5)]
    fan_out("q", backends, actions)
    assert backends[0].seen_params[0].temperature == pytest.approx(0.5)
    assert backends[1].seen_params[0].temperature == pytest.approx(1.5)


def test_fan_out_timeout_marker() -> None:
    backends = [ScriptedBackend("slow", "late", delay=0.6),
                ScriptedBackend("fast", "ok")]
    items = fan_out("q", backends, center(2), timeout=0.1)
    by_id = {i.identity: i for i in items}
    assert by_id["slow"].answer is None
    assert by_id["slow"].error == "timeout"
    assert by_id["fast"].answer.text == "ok"


def test_fan_out_partial_failure_degrades() -> None:
    backends = [ScriptedBackend("bad", "", fail=True),
                ScriptedBackend("good", "fine")]
    items = fan_out("q", backends, center(2))
    by_id = {i.identity: i for i in items}
    assert by_id["bad"].answer is None
    assert "scripted failure" in by_id["bad"].error
    assert by_id["good"].answer.text == "fine"


def test_fan_out_all_failed_raises() -> None:
    backends = [ScriptedBackend("a", "", fail=True),
                ScriptedBackend("b", "", fail=True)]
    with pytest.raises(BackendError, match="every executor failed"):
        fan_out("q", backends, center(2))


def test_fan_out_input_validation() -> None:
    with pytest.raises(UsageError):
        fan_out("q", [], [])
    with pytest.raises(UsageError):
        fan_out("q", [ScriptedBackend("a", "x")], center(2))
    with pytest.raises(UsageError):
        fan_out("q", [ScriptedBackend("a", "x"), ScriptedBackend("a", "y")],
                center(2))


def test_parse_hypothesis_text() -> None:
    name, semantics = parse_hypothesis_text(
        "Chronic stress\nSustained activation.\nSecond sentence.")
    assert name == "Chronic stress"
    assert semantics == "Sustained activation. Second sentence."
    assert parse_hypothesis_text("Only name") == ("Only name", "")
    with pytest.raises(UsageError):
        parse_hypothesis_text("   \n  ")


@dataclass
class FakeEvidence:
    record_id: str
    supports: bool
    support_score: float
    documents: tuple


@dataclass
class FakeDoc:
    title: str


def answered(identity: str, text: str, confidence: float) -> FanOutItem:
    return FanOutItem(identity=identity, answer=AnswerRecord(
        text=text, embedding=seeded_embedding(text, 0),
        confidence=confidence))


def test_aggregation_prompt_lists_answers_and_verdicts() -> None:
    items = [answered("exec_a", "Tar deposits\nResidue.", 0.8),
             FanOutItem(identity="exec_b", answer=None, error="timeout")]
    evidence = [
        FakeEvidence("L:S->L", True, 0.9, (FakeDoc("Residue study"),)),
        FakeEvidence("L:L->C", False, 0.0, ()),
    ]
    text = build_aggregation_prompt("L", items, evidence)
    assert "[exec_a] (confidence 0.80): Tar deposits" in text
    assert "exec_b" not in text
    assert "- L:S->L: supported (score 0.90; top document: 'Residue study')" in text
    assert "- L:L->C: unsupported (no documents retrieved)" in text


def test_aggregate_uses_coordinator_answer() -> None:
    items = [answered("exec_a", "Tar deposits\nA residue layer.", 0.8),
             answered("exec_b", "Soot buildup\nCarbon residue.", 0.7)]
    coordinator = ScriptedBackend("coord", "Tar deposits\nConsensus wording.",
                                  confidence=0.9)
    out, hyp = aggregate("L1", items, [], coordinator)
    assert out.fallback_used is False
    assert hyp.latent_id == "L1"
    assert hyp.proposed_name == "Tar deposits"
    assert hyp.semantics == "Consensus wording."
    assert hyp.confidence == 0.9


def test_aggregate_fallback_picks_highest_confidence() -> None:
    items = [answered("exec_a", "First answer\nx.", 0.6),
             answered("exec_b", "Second answer\ny.", 0.9)]
    coordinator = ScriptedBackend("coord", "", fail=True)
    out, hyp = aggregate("L1", items, [], coordinator)
    assert out.fallback_used is True
    assert hyp.proposed_name == "Second answer"
    assert hyp.confidence == 0.9


def test_aggregate_requires_a_live_answer() -> None:
    items = [FanOutItem(identity="exec_a", answer=None, error="timeout")]
    with pytest.raises(UsageError):
        aggregate("L1", items, [], ScriptedBackend("coord", "Name"))


def test_aggregate_cites_only_retrieved_records() -> None:
    """Evidence ids flow through to the hypothesis only when documents
    actually came back."""
    items = [answered("exec_a", "Name\nMeaning.", 0.8)]
    evidence = [
        FakeEvidence("L:A->L", True, 1.0, (FakeDoc("doc"),)),
        FakeEvidence("L:L->B", False, 0.0, ()),
        FakeEvidence("L:L->C", False, 0.2, (FakeDoc("weak"),)),
    ]
    _, hyp = aggregate("L", items, evidence, ScriptedBackend("coord", "Name"))
    assert hyp.evidence_refs == ("L:A->L", "L:L->C")


def mock_table(query: str):
    key = query_key(query)
    return {
        (key, 1, 2): MockReply(text="bucketed reply", confidence=0.8),
        (key, "*", "*"): MockReply(text="wildcard reply", confidence=0.5),
    }


def test_mock_backend_returns_table_text_verbatim() -> None:
    backend = MockBackend("exec_a", seed=7, table=mock_table("the query"))
    record = backend.generate("the query",
                              decode_params(PromptEmbedding(0.3, 0.3)))
    assert record.text == "wildcard reply"
    assert record.confidence == 0.5
    np.testing.assert_array_equal(record.embedding,
                                  seeded_embedding("wildcard reply", 7))


def test_mock_backend_bucket_boundaries() -> None:
    """Fractions 0.49 and 0.51 land in buckets 1 and 2 respectively."""
    backend = MockBackend("exec_a", seed=0, table=mock_table("q"))
    exact = backend.generate("q", decode_params(PromptEmbedding(0.49, 0.51)))
    assert exact.text == "bucketed reply"
    off = backend.generate("q", decode_params(PromptEmbedding(0.51, 0.51)))
    assert off.text == "wildcard reply"


def test_mock_backend_miss_raises_fixture_error() -> None:
    backend = MockBackend("exec_a", seed=0, table=mock_table("known"))
    with pytest.raises(FixtureError, match="exec_a"):
        backend.generate("unknown query",
                         decode_params(PromptEmbedding(0.5, 0.5)))


def test_mock_backend_from_json(tmp_path) -> None:
    key = query_key("saved query")
    path = tmp_path / "table.json"
    path.write_text(json.dumps({
        "identity": "exec_b", "seed": 3,
        "entries": [{"query_sha16": key, "t_bucket": "*", "p_bucket": "*",
                     "text": "from disk", "confidence": 0.75}],
    }))
    backend = MockBackend.from_json(path)
    assert backend.identity == "exec_b"
    record = backend.generate("saved query",
                              decode_params(PromptEmbedding(0.5, 0.5)))
    assert record.text == "from disk"
    assert record.confidence == 0.75
