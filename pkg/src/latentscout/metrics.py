"""Run metrics: naming accuracy and evidence-support ratios.

ACC scores proposed latent names against an accepted-name list with an
embedding fallback for synonyms.  CAcc and ECit are support ratios over,
respectively, the edges where retrieval returned anything and all edges
incident to a latent variable.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InvariantViolation, UsageError
from .nn.layers import cosine_similarity

DEFAULT_SIMILARITY_THRESHOLD = 0.8

_PUNCT = re.compile(r"[^\w\s]")
_SPACE = re.compile(r"\s+")


def normalize_name(name: str) -> str:
    """Lowercase, turn punctuation into spaces, collapse runs of whitespace."""
    cleaned = _PUNCT.sub(" ", name.lower())
    return _SPACE.sub(" ", cleaned).strip()


@dataclass(frozen=True)
class GroundTruthEntry:
    names: Tuple[str, ...]
    embedding: Optional[np.ndarray] = None


@dataclass(frozen=True)
class GroundTruth:
    """Accepted names (and optional reference embeddings) per latent id."""
    entries: Mapping[str, GroundTruthEntry]

    def __contains__(self, latent_id: str) -> bool:
        return latent_id in self.entries


def load_ground_truth(path) -> GroundTruth:
    """Read a JSON map latent_id -> [names] or latent_id -> {names, embedding}."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise UsageError("ground-truth file must be a JSON object keyed by latent id")
    entries: Dict[str, GroundTruthEntry] = {}
    for latent_id, value in raw.items():
        if isinstance(value, list):
            names, embedding = value, None
        elif isinstance(value, dict):
            names = value.get("names", [])
            emb = value.get("embedding")
            embedding = None if emb is None else np.asarray(emb, dtype=np.float64)
        else:
            raise UsageError(
                f"ground-truth entry for {latent_id!r} must be a list or object")
        if not names:
            raise UsageError(f"ground-truth entry for {latent_id!r} has no names")
        entries[latent_id] = GroundTruthEntry(
            names=tuple(str(n) for n in names), embedding=embedding)
    return GroundTruth(entries=entries)


@dataclass(frozen=True)
class LatentVerdict:
    latent_id: str
    name: str
    matched: bool
    matched_by: Optional[str]  # "name" | "embedding" | None


def _match_one(hypothesis, entry: GroundTruthEntry, threshold: float) -> Optional[str]:
    proposed = normalize_name(hypothesis.name)
    for accepted in entry.names:
        if proposed == normalize_name(accepted):
            return "name"
    hyp_emb = getattr(hypothesis, "embedding", None)
    if hyp_emb is not None and entry.embedding is not None:
        if cosine_similarity(hyp_emb, entry.embedding) >= threshold:
            return "embedding"
    return None


def acc(hypotheses: Sequence, truth: GroundTruth,
        threshold: float = DEFAULT_SIMILARITY_THRESHOLD) -> float:
    """Matched fraction of proposed latent names.

    A hypothesis needs `latent_id` and `name` attributes, plus optionally an
    `embedding` for the similarity fallback.  Raises on an empty input or a
    latent the ground truth does not cover.
    """
    if not hypotheses:
        raise UsageError("accuracy over zero latents is undefined")
    matched = 0
    for hyp in hypotheses:
        if hyp.latent_id not in truth:
            raise UsageError(f"no ground truth for latent {hyp.latent_id!r}")
        if _match_one(hyp, truth.entries[hyp.latent_id], threshold) is not None:
            matched += 1
    return matched / len(hypotheses)


def cacc(n: int, eg: int) -> float:
    """Supported fraction among searched edges: n/EG, 0 when nothing searched."""
    if n < 0 or eg < 0:
        raise UsageError(f"counts must be non-negative, got n={n}, EG={eg}")
    if n > eg:
        raise InvariantViolation(f"supported edges n={n} exceed searched edges EG={eg}")
    if eg == 0:
        return 0.0
    return n / eg


def ecit(n: int, ea: int) -> float:
    """Supported fraction among all latent-incident edges: n/EA, 0 when EA=0."""
    if n < 0 or ea < 0:
        raise UsageError(f"counts must be non-negative, got n={n}, EA={ea}")
    if n > ea:
        raise InvariantViolation(f"supported edges n={n} exceed incident edges EA={ea}")
    if ea == 0:
        return 0.0
    return n / ea


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    cacc: float
    ecit: float
    matched: int
    total_latents: int
    n: int
    eg: int
    ea: int
    per_latent: Tuple[LatentVerdict, ...] = ()
    degenerate: Tuple[str, ...] = ()

    def to_json(self) -> str:
        payload = {
            "acc": self.acc,
            "cacc": self.cacc,
            "ecit": self.ecit,
            "counts": {
                "matched": self.matched,
                "total_latents": self.total_latents,
                "n": self.n,
                "eg": self.eg,
                "ea": self.ea,
            },
            "per_latent": [
                {"latent_id": v.latent_id, "name": v.name,
                 "matched": v.matched, "matched_by": v.matched_by}
                for v in self.per_latent
            ],
            "degenerate": list(self.degenerate),
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        payload = json.loads(text)
        counts = payload["counts"]
        return cls(
            acc=payload["acc"],
            cacc=payload["cacc"],
            ecit=payload["ecit"],
            matched=counts["matched"],
            total_latents=counts["total_latents"],
            n=counts["n"],
            eg=counts["eg"],
            ea=counts["ea"],
            per_latent=tuple(
                LatentVerdict(latent_id=v["latent_id"], name=v["name"],
                              matched=v["matched"], matched_by=v["matched_by"])
                for v in payload["per_latent"]
            ),
            degenerate=tuple(payload["degenerate"]),
        )


def build_report(hypotheses: Sequence, truth: GroundTruth, n: int, eg: int, ea: int,
                 threshold: float = DEFAULT_SIMILARITY_THRESHOLD) -> MetricsReport:
    """Score hypotheses and assemble the full report.

    Zero-denominator ratios come back as 0 and are listed under `degenerate`
    so a reader can tell a true zero from an empty denominator.
    """
    verdicts: List[LatentVerdict] = []
    matched = 0
    for hyp in hypotheses:
        if hyp.latent_id not in truth:
            raise UsageError(f"no ground truth for latent {hyp.latent_id!r}")
        by = _match_one(hyp, truth.entries[hyp.latent_id], threshold)
        if by is not None:
            matched += 1
        verdicts.append(LatentVerdict(
            latent_id=hyp.latent_id, name=hyp.name,
            matched=by is not None, matched_by=by))
    if not hypotheses:
        raise UsageError("cannot build a report over zero latents")
    degenerate = []
    if eg == 0:
        degenerate.append("cacc")
    if ea == 0:
        degenerate.append("ecit")
    return MetricsReport(
        acc=matched / len(hypotheses),
        cacc=cacc(n, eg),
        ecit=ecit(n, ea),
        matched=matched,
        total_latents=len(hypotheses),
        n=n, eg=eg, ea=ea,
        per_latent=tuple(verdicts),
        degenerate=tuple(degenerate),
    )
