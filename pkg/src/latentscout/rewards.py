"""Per-agent reward: four components blended by convex weights.

All four components are pure functions of answer embeddings, a confidence
scalar, and edge-verification outcomes.  Nothing here touches a network or a
backend, which keeps the reward path exhaustively checkable by hand.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .nn.layers import cosine_similarity

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class AnswerRecord:
    """One agent's answer: raw text, its embedding, and the backend's
    self-reported confidence."""
    text: str
    embedding: np.ndarray
    confidence: float

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1:
            raise DimensionError("answer embedding must be a 1-D vector")
        object.__setattr__(self, "embedding", emb)
        if not (0.0 <= self.confidence <= 1.0):
            raise ConfigurationError(
                f"confidence must lie in [0,1], got {self.confidence}")


@dataclass(frozen=True)
class RewardWeights:
    """Convex weights over (alignment, uncertainty, contribution,
    evidence-reliability)."""
    alignment: float = 0.25
    uncertainty: float = 0.25
    contribution: float = 0.25
    evidence: float = 0.25

    def __post_init__(self):
        values = self.as_tuple()
        if any(a < 0.0 for a in values):
            raise ConfigurationError(f"reward weights must be >= 0, got {values}")
        total = sum(values)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise ConfigurationError(
                f"reward weights must sum to 1 within {WEIGHT_SUM_TOL}, got {total!r}")

    def as_tuple(self):
        return (self.alignment, self.uncertainty, self.contribution, self.evidence)


@dataclass(frozen=True)
class RewardBreakdown:
    r_al: float
    r_ur: float
    r_cc: float
    r_er: float
    total: float


def _check_same_dim(u: AnswerRecord, c: AnswerRecord) -> None:
    if u.embedding.shape[0] != c.embedding.shape[0]:
        raise DimensionError(
            f"embedding dims differ: {u.embedding.shape[0]} vs {c.embedding.shape[0]}")


def action_likelihood(u: AnswerRecord, consensus: AnswerRecord, r_max: float) -> float:
    """Similarity of the agent's answer to the consensus answer, capped at r_max."""
    _check_same_dim(u, consensus)
    return min(r_max, cosine_similarity(u.embedding, consensus.embedding))


def uncertainty_reduction(u: AnswerRecord, consensus: AnswerRecord) -> float:
    """Confidence-weighted consensus similarity; in [-1, 1]."""
    _check_same_dim(u, consensus)
    return u.confidence * cosine_similarity(u.embedding, consensus.embedding)


def collaborative_contribution(u: AnswerRecord, others: Sequence[AnswerRecord],
                               consensus: AnswerRecord, r_max: float) -> float:
    """Marginal alignment gain from including this agent's answer.

    With peers present: how much closer the pooled mean embedding sits to the
    consensus with the agent's answer included versus the peers' mean alone.
    Without peers the agent's own consensus similarity stands in.  Negative
    marginal alignment earns nothing rather than a penalty, so the result is
    always in [0, r_max] for r_max >= 0.
    """
    _check_same_dim(u, consensus)
    for other in others:
        _check_same_dim(other, consensus)
    if not others:
        raw = cosine_similarity(u.embedding, consensus.embedding)
    else:
        peer_mean = np.mean([o.embedding for o in others], axis=0)
        pooled = np.mean([u.embedding] + [o.embedding for o in others], axis=0)
        raw = (cosine_similarity(pooled, consensus.embedding)
               - cosine_similarity(peer_mean, consensus.embedding))
    return min(r_max, max(0.0, raw))


def evidence_reliability(records: Iterable) -> float:
    """Supported fraction of this agent's searched edges.

    Accepts any records exposing `documents` (sized) and `supports` (bool),
    as produced by edge verification.  An edge counts as searched when at
    least one document came back; with no searched edges the component is 0.
    """
    searched = 0
    supported = 0
    for record in records:
        if len(record.documents) == 0:
            continue
        searched += 1
        if record.supports:
            supported += 1
    if searched == 0:
        return 0.0
    return supported / searched


def total_reward(r_al: float, r_ur: float, r_cc: float, r_er: float,
                 weights: RewardWeights) -> RewardBreakdown:
    """Convex combination of the four components under validated weights."""
    if not isinstance(weights, RewardWeights):
        weights = RewardWeights(*weights)
    a1, a2, a3, a4 = weights.as_tuple()
    total = a1 * r_al + a2 * r_ur + a3 * r_cc + a4 * r_er
    return RewardBreakdown(r_al=r_al, r_ur=r_ur, r_cc=r_cc, r_er=r_er, total=total)
