"""Executor and coordinator behavior around text backends.

An executor turns a structural query about one hidden variable into a
candidate answer; the coordinator folds all answers plus edge-verification
verdicts into a final named hypothesis.  Backends satisfy one small contract
(generate, embed, identity) so the mock double used in tests and the HTTP
client used live are interchangeable.
"""
from __future__ import annotations

import hashlib
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import requests

from .belief import PromptEmbedding
from .errors import BackendError, ConfigurationError, FixtureError, UsageError
from .graph import CausalGraph, MarkovBlanket, Variable
from .rewards import AnswerRecord

EMBEDDING_DIM = 64
BUCKET_WIDTH = 0.25
COORDINATOR_ACTION = PromptEmbedding(0.5, 0.5)


@dataclass(frozen=True)
class DecodingRanges:
    """Affine ranges mapping embedding fractions onto decoding parameters."""
    temperature_low: float = 0.0
    temperature_high: float = 2.0
    penalty_high: float = 2.0

    def __post_init__(self):
        if self.temperature_high <= self.temperature_low:
            raise ConfigurationError("temperature range must have positive width")
        if self.penalty_high <= 1.0:
            raise ConfigurationError("penalty_high must exceed 1")


DEFAULT_RANGES = DecodingRanges()


@dataclass(frozen=True)
class DecodingParams:
    temperature: float
    repetition_penalty: float


def decode_params(e: PromptEmbedding, ranges: DecodingRanges = DEFAULT_RANGES
                  ) -> DecodingParams:
    """Map the action vector [T, p] onto concrete decoding parameters."""
    temperature = ranges.temperature_low + e.T * (
        ranges.temperature_high - ranges.temperature_low)
    penalty = 1.0 + e.p * (ranges.penalty_high - 1.0)
    return DecodingParams(temperature=temperature, repetition_penalty=penalty)


def seeded_embedding(text: str, seed: int, dim: int = EMBEDDING_DIM) -> np.ndarray:
    """Deterministic bag-of-tokens feature hash, unit-normalized.

    Hash-based rather than RNG-based so the same text embeds identically
    across processes and platforms.
    """
    vec = np.zeros(dim, dtype=np.float64)
    for token in re.findall(r"[a-z0-9]+", text.lower()):
        digest = hashlib.sha256(f"{seed}|{token}".encode("utf-8")).digest()
        index = int.from_bytes(digest[:4], "big") % dim
        sign = 1.0 if digest[4] % 2 == 0 else -1.0
        vec[index] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


class ExecutorBackend(Protocol):
    """Behavioral contract all text backends satisfy."""
    identity: str

    def generate(self, query: str, params: DecodingParams) -> AnswerRecord: ...

    def embed(self, text: str) -> np.ndarray: ...


def query_key(query: str) -> str:
    """Stable 16-hex-digit key for a query string; mock tables index on it."""
    return hashlib.sha256(query.encode("utf-8")).hexdigest()[:16]


Bucket = Union[int, str]  # an int bucket index, or "*" for any


def _bucket(fraction: float) -> int:
    return int(fraction / BUCKET_WIDTH)


@dataclass(frozen=True)
class MockReply:
    text: str
    confidence: float


class MockBackend:
    """Scripted backend: (query key, quantized action buckets) -> reply.

    Bucket indices quantize the action fractions recovered from the decoding
    parameters (width 0.25 over (0,1)), so scripts can react to coarse action
    changes without enumerating continuous values.  "*" wildcards match any
    bucket; a miss raises, never silently defaults.
    """

    def __init__(self, identity: str, seed: int,
                 table: Dict[Tuple[str, Bucket, Bucket], MockReply],
                 ranges: DecodingRanges = DEFAULT_RANGES):
        self.identity = identity
        self.seed = seed
        self.table = dict(table)
        self.ranges = ranges

    @classmethod
    def from_json(cls, path) -> "MockBackend":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        table: Dict[Tuple[str, Bucket, Bucket], MockReply] = {}
        for entry in payload["entries"]:
            key = (entry["query_sha16"], entry["t_bucket"], entry["p_bucket"])
            table[key] = MockReply(text=entry["text"],
                                   confidence=float(entry["confidence"]))
        return cls(identity=payload["identity"], seed=int(payload["seed"]),
                   table=table)

    def embed(self, text: str) -> np.ndarray:
        return seeded_embedding(text, self.seed)

    def generate(self, query: str, params: DecodingParams) -> AnswerRecord:
        r = self.ranges
        frac_t = (params.temperature - r.temperature_low) / (
            r.temperature_high - r.temperature_low)
        frac_p = (params.repetition_penalty - 1.0) / (r.penalty_high - 1.0)
        tb, pb = _bucket(frac_t), _bucket(frac_p)
        key = query_key(query)
        for candidate in ((key, tb, pb), (key, tb, "*"), (key, "*", pb),
                          (key, "*", "*")):
            reply = self.table.get(candidate)
            if reply is not None:
                return AnswerRecord(text=reply.text,
                                    embedding=self.embed(reply.text),
                                    confidence=reply.confidence)
        raise FixtureError(
            f"mock backend {self.identity!r} has no entry for query key {key} "
            f"(buckets t={tb}, p={pb}); query starts: {query[:80]!r}")


class HttpBackend:
    """Chat-completion-style HTTP client.

    Confidence is exp(mean token log-probability) when the response carries
    log-probabilities, else a configured constant.  Embeddings reuse the
    seeded feature hash because the endpoint contract covers generation only.
    """

    def __init__(self, identity: str, endpoint: str, model: str,
                 api_key: Optional[str] = None, seed: int = 0,
                 timeout: float = 30.0, default_confidence: float = 0.5):
        self.identity = identity
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.seed = seed
        self.timeout = timeout
        self.default_confidence = default_confidence

    def embed(self, text: str) -> np.ndarray:
        return seeded_embedding(text, self.seed)

    def generate(self, query: str, params: DecodingParams) -> AnswerRecord:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": query}],
            "temperature": params.temperature,
            "repetition_penalty": params.repetition_penalty,
        }
        try:
            response = requests.post(self.endpoint, json=payload,
                                     headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendError(f"backend {self.identity!r}: {exc}") from exc
        if response.status_code != 200:
            raise BackendError(
                f"backend {self.identity!r}: HTTP {response.status_code}: "
                f"{response.text[:200]}")
        try:
            data = response.json()
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(
                f"backend {self.identity!r}: unexpected payload shape: "
                f"{response.text[:200]}") from exc
        confidence = self.default_confidence
        logprobs = choice.get("logprobs") if isinstance(choice, dict) else None
        if isinstance(logprobs, dict):
            tokens = logprobs.get("content") or []
            values = [t.get("logprob") for t in tokens
                      if isinstance(t, dict) and t.get("logprob") is not None]
            if values:
                confidence = float(np.clip(np.exp(np.mean(values)), 0.0, 1.0))
        return AnswerRecord(text=text, embedding=self.embed(text),
                            confidence=confidence)


def build_query(latent: Variable, blanket: MarkovBlanket, graph: CausalGraph,
                domain: str = "general",
                evidence_digest: Optional[str] = None) -> str:
    """Deterministic structural prompt describing one hidden variable.

    Names the latent's direct causes, direct effects, and remaining blanket
    members, lists its incident edges with directions, and appends the prior
    round's evidence digest when one exists.
    """
    if blanket.target != latent.id:
        raise UsageError(
            f"blanket belongs to {blanket.target!r}, not {latent.id!r}")

    def label(var_id: str) -> str:
        return graph.variable(var_id).label

    parents = sorted(graph.parents(latent.id))
    children = sorted(graph.children(latent.id))
    others = sorted(blanket.members - set(parents) - set(children))
    lines = [
        f"A causal graph in the domain '{domain}' contains a hidden variable "
        f"'{latent.label}'."
    ]
    if not blanket.members:
        lines.append("The variable has no observed neighbors in the graph.")
    else:
        if parents:
            lines.append("Direct causes: " + ", ".join(label(p) for p in parents) + ".")
        if children:
            lines.append("Direct effects: " + ", ".join(label(c) for c in children) + ".")
        if others:
            lines.append("Other linked variables: "
                         + ", ".join(label(o) for o in others) + ".")
        incident = sorted(
            (e for e in graph.edges if latent.id in (e.from_id, e.to_id)),
            key=lambda e: (e.from_id, e.to_id))
        arrows = [f"{label(e.from_id)} -> {label(e.to_id)}" if e.oriented
                  else f"{label(e.from_id)} -- {label(e.to_id)}" for e in incident]
        if arrows:
            lines.append("Edges: " + "; ".join(arrows) + ".")
    if evidence_digest:
        lines.append("Evidence from the previous round:")
        lines.append(evidence_digest)
    lines.append(
        "Task: propose a short name for this hidden variable and a one-sentence "
        "definition of its meaning. Put the name alone on the first line.")
    return "\n".join(lines)


@dataclass(frozen=True)
class FanOutItem:
    """One executor's outcome: an answer, or a failure reason."""
    identity: str
    answer: Optional[AnswerRecord]
    error: Optional[str] = None


def fan_out(query: str, executors: Sequence[ExecutorBackend],
            actions: Sequence[PromptEmbedding],
            timeout: float = 30.0) -> List[FanOutItem]:
    """Query every executor concurrently with its own decoding parameters.

    Results come back sorted by executor identity regardless of completion
    order.  A failed or timed-out executor yields a failure marker; only when
    every executor fails does the call raise.
    """
    if len(executors) != len(actions):
        raise UsageError(
            f"{len(executors)} executors but {len(actions)} actions")
    if not executors:
        raise UsageError("fan_out needs at least one executor")
    identities = [ex.identity for ex in executors]
    if len(set(identities)) != len(identities):
        raise UsageError(f"executor identities must be unique: {identities}")

    pool = ThreadPoolExecutor(max_workers=len(executors))
    futures = [(ex.identity, pool.submit(ex.generate, query, decode_params(act)))
               for ex, act in zip(executors, actions)]
    deadline = time.monotonic() + timeout
    items: List[FanOutItem] = []
    try:
        for identity, future in futures:
            remaining = max(0.0, deadline - time.monotonic())
            try:
                record = future.result(timeout=remaining)
                items.append(FanOutItem(identity=identity, answer=record))
            except FutureTimeout:
                items.append(FanOutItem(identity=identity, answer=None,
                                        error="timeout"))
            except BackendError as exc:
                items.append(FanOutItem(identity=identity, answer=None,
                                        error=str(exc) or type(exc).__name__))
    finally:
        pool.shutdown(wait=False, cancel_futures=True)
    items.sort(key=lambda item: item.identity)
    if all(item.answer is None for item in items):
        details = "; ".join(f"{i.identity}: {i.error}" for i in items)
        raise BackendError(f"every executor failed: {details}")
    return items


@dataclass(frozen=True)
class LatentHypothesis:
    """Final named proposal for one hidden variable."""
    latent_id: str
    proposed_name: str
    semantics: str
    evidence_refs: Tuple[str, ...]
    confidence: float
    embedding: Optional[np.ndarray] = None

    @property
    def name(self) -> str:
        return self.proposed_name

    def to_dict(self) -> dict:
        return {
            "latent_id": self.latent_id,
            "name": self.proposed_name,
            "semantics": self.semantics,
            "evidence": list(self.evidence_refs),
            "confidence": self.confidence,
        }


@dataclass(frozen=True)
class CoordinatorOutput:
    """The consensus answer and whether it came from the fallback path."""
    record: AnswerRecord
    fallback_used: bool


def parse_hypothesis_text(text: str) -> Tuple[str, str]:
    """Split an answer into (name, semantics): first line, then the rest."""
    stripped = text.strip()
    if not stripped:
        raise UsageError("cannot parse a hypothesis from empty text")
    lines = stripped.splitlines()
    name = lines[0].strip()
    semantics = " ".join(part.strip() for part in lines[1:] if part.strip())
    return name, semantics


def build_aggregation_prompt(latent_id: str, items: Sequence[FanOutItem],
                             evidence: Sequence) -> str:
    """Structured digest the coordinator sees: answers plus edge verdicts."""
    lines = [f"Candidate answers for hidden variable '{latent_id}':"]
    for item in items:
        if item.answer is None:
            continue
        lines.append(f"[{item.identity}] (confidence {item.answer.confidence:.2f}): "
                     f"{item.answer.text}")
    if evidence:
        lines.append("Edge verification verdicts:")
        for record in evidence:
            verdict = "supported" if record.supports else "unsupported"
            if record.documents:
                top = record.documents[0].title
                detail = f"score {record.support_score:.2f}; top document: {top!r}"
            else:
                detail = "no documents retrieved"
            lines.append(f"- {record.record_id}: {verdict} ({detail})")
    else:
        lines.append("No edge verification verdicts are available yet.")
    lines.append(
        "Task: produce the best-supported final name for the hidden variable, "
        "alone on the first line, then a one-sentence definition.")
    return "\n".join(lines)


def aggregate(latent_id: str, items: Sequence[FanOutItem], evidence: Sequence,
              coordinator: ExecutorBackend
              ) -> Tuple[CoordinatorOutput, LatentHypothesis]:
    """Fold executor answers and evidence into the final hypothesis.

    The coordinator is just another backend fed the aggregation digest; if it
    fails, the highest-confidence executor answer stands in and the output is
    flagged.  Cited evidence ids are exactly the input records that actually
    retrieved documents, so a hypothesis can never cite evidence it was not
    given.
    """
    live = [item for item in items if item.answer is not None]
    if not live:
        raise UsageError("aggregate requires at least one successful answer")
    digest = build_aggregation_prompt(latent_id, live, evidence)
    fallback_used = False
    try:
        record = coordinator.generate(digest, decode_params(COORDINATOR_ACTION))
    except BackendError:
        best = max(live, key=lambda item: (item.answer.confidence, item.identity))
        record = best.answer
        fallback_used = True
    name, semantics = parse_hypothesis_text(record.text)
    refs = tuple(r.record_id for r in evidence if len(r.documents) > 0)
    hypothesis = LatentHypothesis(
        latent_id=latent_id, proposed_name=name, semantics=semantics,
        evidence_refs=refs, confidence=record.confidence,
        embedding=record.embedding)
    return CoordinatorOutput(record=record, fallback_used=fallback_used), hypothesis
