"""Edge verification against arXiv, Wikipedia, and a local corpus.

Each latent-incident edge becomes a causal-claim query; each enabled source
returns up to k documents; a judge (lexical by default) scores how well the
retrieved text supports the claim.  The counts that fall out (searched edges
EG, supported edges n) drive both the reliability reward and the run metrics.

Offline mode serves recorded raw payloads through the same parsers as live
traffic, so fixture runs are byte-faithful.
"""
from __future__ import annotations

import hashlib
import html
import json
import logging
import re
import time
import xml.etree.ElementTree as ET
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import requests

from .errors import ConfigurationError, PayloadParseError, RetrievalError, UsageError
from .graph import CausalGraph, Edge

log = logging.getLogger(__name__)

SOURCES = ("arxiv", "wikipedia", "local")
ATOM_NS = "{http://www.w3.org/2005/Atom}"

_TOKEN = re.compile(r"[a-z0-9]+")
_TAG = re.compile(r"<[^>]+>")
_SPACE = re.compile(r"\s+")


def _tokens(text: str) -> List[str]:
    return _TOKEN.findall(text.lower())


def _collapse(text: str) -> str:
    return _SPACE.sub(" ", text).strip()


@dataclass(frozen=True)
class Document:
    source: str
    doc_id: str
    title: str
    snippet: str
    retrieval_score: float
    url: Optional[str] = None


@dataclass(frozen=True)
class EvidenceRecord:
    """Verification outcome for one latent-incident edge."""
    record_id: str
    edge: Tuple[str, str, str]  # (from id, to id, "directed" | "undirected")
    query: str
    documents: Tuple[Document, ...]
    supports: bool
    support_score: float


@dataclass(frozen=True)
class SourceConfig:
    arxiv_enabled: bool = True
    wikipedia_enabled: bool = True
    local_enabled: bool = True
    arxiv_url: str = "https://export.arxiv.org/api/query"
    wikipedia_url: str = "https://en.wikipedia.org/w/rest.php/v1/search/page"
    rate_limit: float = 1.0  # requests per second, per source
    top_k: int = 5
    support_threshold: float = 0.5
    offline: bool = True
    fixture_dir: Optional[str] = None
    corpus_dir: Optional[str] = None
    timeout: float = 10.0

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigurationError(f"top_k must be >= 1, got {self.top_k}")
        if self.rate_limit <= 0:
            raise ConfigurationError(
                f"rate_limit must be positive, got {self.rate_limit}")
        if not (0.0 < self.support_threshold <= 1.0):
            raise ConfigurationError(
                f"support_threshold must lie in (0, 1], got {self.support_threshold}")

    def enabled(self, source: str) -> bool:
        if source == "arxiv":
            return self.arxiv_enabled
        if source == "wikipedia":
            return self.wikipedia_enabled
        if source == "local":
            return self.local_enabled
        raise UsageError(f"unknown source {source!r}")


class RateLimiter:
    """Sliding-window limiter: at most `limit` acquisitions per second.

    Clock and sleep are injectable so tests can drive a virtual clock.
    """

    def __init__(self, limit: float,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if limit <= 0:
            raise ConfigurationError(f"rate limit must be positive, got {limit}")
        self.limit = limit
        self.clock = clock
        self.sleep = sleep
        self._stamps: deque = deque()

    def acquire(self) -> None:
        while True:
            now = self.clock()
            while self._stamps and now - self._stamps[0] >= 1.0:
                self._stamps.popleft()
            if len(self._stamps) < self.limit:
                self._stamps.append(now)
                return
            self.sleep(self._stamps[0] + 1.0 - now)


def fixture_key(source: str, query: str) -> str:
    """Filename stem for a recorded payload, stable across runs."""
    return hashlib.sha256(f"{source}:{query}".encode("utf-8")).hexdigest()[:16]


def record_fixture(fixture_dir, source: str, query: str, url: str,
                   body: bytes) -> str:
    """Store a raw payload plus the request that produced it; returns the key."""
    directory = Path(fixture_dir)
    directory.mkdir(parents=True, exist_ok=True)
    key = fixture_key(source, query)
    meta = {"source": source, "query": query, "url": url}
    (directory / f"{key}.meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (directory / f"{key}.body").write_bytes(body)
    return key


def load_fixture(fixture_dir, source: str, query: str) -> bytes:
    if fixture_dir is None:
        raise RetrievalError(
            f"offline mode without a fixture directory; cannot serve {source} "
            f"query {query[:60]!r}")
    key = fixture_key(source, query)
    path = Path(fixture_dir) / f"{key}.body"
    if not path.exists():
        raise RetrievalError(
            f"no recorded {source} payload for query {query[:60]!r} "
            f"(expected {path})")
    return path.read_bytes()


def parse_arxiv_atom(body: bytes) -> List[Document]:
    """Parse an Atom feed into documents; one per entry, rank-scored.

    Titles and summaries have internal whitespace runs collapsed, since the
    feed wraps them across indented lines.
    """
    try:
        root = ET.fromstring(body)
    except ET.ParseError as exc:
        raise PayloadParseError(
            f"arXiv payload is not well-formed XML: {exc}; "
            f"starts: {body[:200]!r}") from exc
    docs: List[Document] = []
    for rank, entry in enumerate(root.findall(f"{ATOM_NS}entry")):
        raw_id = entry.findtext(f"{ATOM_NS}id", default="").strip()
        doc_id = raw_id.rsplit("/abs/", 1)[-1] if "/abs/" in raw_id else raw_id
        title = _collapse(entry.findtext(f"{ATOM_NS}title", default=""))
        summary = _collapse(entry.findtext(f"{ATOM_NS}summary", default=""))
        if not doc_id or not title:
            raise PayloadParseError(
                f"arXiv entry {rank} lacks id or title; starts: {body[:200]!r}")
        docs.append(Document(
            source="arxiv", doc_id=doc_id, title=title, snippet=summary,
            retrieval_score=1.0 / (1.0 + rank), url=raw_id or None))
    return docs


def parse_wikipedia_json(body: bytes) -> List[Document]:
    """Parse a REST search response; excerpt markup is stripped to text."""
    try:
        payload = json.loads(body.decode("utf-8"))
        pages = payload["pages"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise PayloadParseError(
            f"Wikipedia payload is not the expected JSON shape: {exc}; "
            f"starts: {body[:200]!r}") from exc
    docs: List[Document] = []
    for rank, page in enumerate(pages):
        if not isinstance(page, dict) or "title" not in page:
            raise PayloadParseError(
                f"Wikipedia page entry {rank} lacks a title; "
                f"starts: {body[:200]!r}")
        excerpt = page.get("excerpt") or ""
        snippet = html.unescape(_TAG.sub("", excerpt))
        key = page.get("key")
        docs.append(Document(
            source="wikipedia",
            doc_id=str(page.get("id", key or page["title"])),
            title=page["title"],
            snippet=snippet,
            retrieval_score=1.0 / (1.0 + rank),
            url=f"https://en.wikipedia.org/wiki/{key}" if key else None))
    return docs


def _corpus_documents(corpus_dir) -> List[dict]:
    if corpus_dir is None:
        raise ConfigurationError("local source enabled but no corpus directory set")
    directory = Path(corpus_dir)
    if not directory.is_dir():
        raise ConfigurationError(f"corpus directory {directory} does not exist")
    entries = []
    for path in sorted(directory.glob("*.json")):
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise PayloadParseError(f"corpus file {path} is not JSON: {exc}") from exc
        for fieldname in ("doc_id", "title", "text"):
            if fieldname not in raw:
                raise PayloadParseError(f"corpus file {path} lacks {fieldname!r}")
        entries.append(raw)
    return entries


def _search_local(query: str, config: SourceConfig) -> List[Document]:
    query_tokens = set(_tokens(query))
    if not query_tokens:
        return []
    scored = []
    for raw in _corpus_documents(config.corpus_dir):
        doc_tokens = set(_tokens(raw["title"])) | set(_tokens(raw["text"]))
        overlap = len(query_tokens & doc_tokens) / len(query_tokens)
        if overlap > 0.0:
            scored.append((overlap, raw))
    scored.sort(key=lambda pair: (-pair[0], pair[1]["doc_id"]))
    return [
        Document(source="local", doc_id=raw["doc_id"], title=raw["title"],
                 snippet=_collapse(raw["text"])[:500], retrieval_score=score,
                 url=None)
        for score, raw in scored[:config.top_k]
    ]


def _fetch(source: str, query: str, config: SourceConfig,
           limiter: Optional[RateLimiter]) -> bytes:
    if config.offline:
        return load_fixture(config.fixture_dir, source, query)
    if limiter is not None:
        limiter.acquire()
    if source == "arxiv":
        url = config.arxiv_url
        params = {"search_query": f'ti:"{query}" OR abs:"{query}"',
                  "max_results": str(config.top_k)}
    else:
        url = config.wikipedia_url
        params = {"q": query, "limit": str(config.top_k)}
    try:
        response = requests.get(url, params=params, timeout=config.timeout)
    except requests.RequestException as exc:
        raise RetrievalError(f"{source} request failed: {exc}") from exc
    if response.status_code != 200:
        raise RetrievalError(
            f"{source} returned HTTP {response.status_code}: "
            f"{response.text[:200]}")
    return response.content


def search(source: str, query: str, config: SourceConfig,
           limiter: Optional[RateLimiter] = None) -> List[Document]:
    """Top-k documents from one source, score-descending.

    Raises a retrieval error on transport problems (the edge then counts as
    unsearched, not unsupported) and a parse error on malformed payloads.
    """
    if not config.enabled(source):
        raise ConfigurationError(f"source {source!r} is disabled")
    if source == "local":
        return _search_local(query, config)
    body = _fetch(source, query, config, limiter)
    if source == "arxiv":
        docs = parse_arxiv_atom(body)
    else:
        docs = parse_wikipedia_json(body)
    return docs[:config.top_k]


def judge_support(endpoints: Tuple[str, str], query: str,
                  documents: Sequence[Document],
                  judge: Optional[Callable] = None,
                  threshold: float = 0.5) -> Tuple[bool, float]:
    """Score how well retrieved documents support the causal claim.

    With a judge backend: the maximum of its per-document scores in [0, 1].
    Without one: a lexical heuristic, the fraction of the two endpoint names'
    tokens appearing in a document's snippet, maximized over documents.  A
    failing judge falls back to the heuristic with a logged warning.
    """
    if not documents:
        return False, 0.0
    score: Optional[float] = None
    if judge is not None:
        try:
            score = max(float(judge(endpoints, query, doc)) for doc in documents)
        except Exception as exc:  # noqa: BLE001 - any judge failure falls back
            log.warning("judge backend failed (%s); using lexical heuristic", exc)
            score = None
    if score is None:
        wanted = set(_tokens(endpoints[0])) | set(_tokens(endpoints[1]))
        if not wanted:
            return False, 0.0
        best = 0.0
        for doc in documents:
            present = set(_tokens(doc.snippet))
            best = max(best, len(wanted & present) / len(wanted))
        score = best
    score = float(min(1.0, max(0.0, score)))
    return score >= threshold, score


@dataclass(frozen=True)
class EdgeQuery:
    """One latent-incident edge with its verification query."""
    edge: Edge
    endpoint_names: Tuple[str, str]
    query: str
    record_id: str


def edge_queries(hypothesis, graph: CausalGraph) -> List[EdgeQuery]:
    """One causal-claim query per edge incident to the hypothesis's latent.

    The proposed name stands in for the latent endpoint; order is fixed by
    (from, to) ids so repeated calls are identical.
    """
    latent = graph.variable(hypothesis.latent_id)
    if latent.kind != "latent":
        raise UsageError(f"variable {latent.id!r} is not a latent")

    def display(var_id: str) -> str:
        if var_id == latent.id:
            return hypothesis.proposed_name
        return graph.variable(var_id).label

    queries: List[EdgeQuery] = []
    incident = sorted(
        (e for e in graph.edges if latent.id in (e.from_id, e.to_id)),
        key=lambda e: (e.from_id, e.to_id))
    for edge in incident:
        name_a, name_b = display(edge.from_id), display(edge.to_id)
        if edge.oriented:
            text = f"does {name_a} cause {name_b}"
            record_id = f"{hypothesis.latent_id}:{edge.from_id}->{edge.to_id}"
        else:
            text = f"are {name_a} and {name_b} causally related"
            record_id = f"{hypothesis.latent_id}:{edge.from_id}--{edge.to_id}"
        queries.append(EdgeQuery(edge=edge, endpoint_names=(name_a, name_b),
                                 query=text, record_id=record_id))
    return queries


@dataclass(frozen=True)
class VerificationResult:
    records: Tuple[EvidenceRecord, ...]
    n: int   # edges judged supported
    eg: int  # edges where retrieval returned at least one document


def verify(hypothesis, graph: CausalGraph, config: SourceConfig,
           judge: Optional[Callable] = None) -> VerificationResult:
    """Search every enabled source for every incident edge and judge support.

    Documents merge across sources, deduplicated by (source, doc id) with the
    best-scoring copy kept, then re-rank and truncate to top_k.  A source
    failing to answer on an edge only removes that source's contribution; an
    edge with no documents at all stays unsearched and is excluded from EG.
    Malformed payloads are different: they mean a broken fixture or corpus
    file, and they propagate instead of degrading.
    """
    limiters: Dict[str, RateLimiter] = {}
    if not config.offline:
        limiters = {s: RateLimiter(config.rate_limit) for s in SOURCES
                    if s != "local" and config.enabled(s)}
    records: List[EvidenceRecord] = []
    for eq in edge_queries(hypothesis, graph):
        merged: Dict[Tuple[str, str], Document] = {}
        for source in SOURCES:
            if not config.enabled(source):
                continue
            try:
                docs = search(source, eq.query, config, limiters.get(source))
            except PayloadParseError:
                raise
            except RetrievalError as exc:
                log.warning("search failed for %s on %s: %s",
                            source, eq.record_id, exc)
                continue
            for doc in docs:
                key = (doc.source, doc.doc_id)
                kept = merged.get(key)
                if kept is None or doc.retrieval_score > kept.retrieval_score:
                    merged[key] = doc
        ranked = sorted(
            merged.values(),
            key=lambda d: (-d.retrieval_score, d.source, d.doc_id))
        top = tuple(ranked[:config.top_k])
        supports, score = judge_support(
            eq.endpoint_names, eq.query, top, judge, config.support_threshold)
        direction = "directed" if eq.edge.oriented else "undirected"
        records.append(EvidenceRecord(
            record_id=eq.record_id,
            edge=(eq.edge.from_id, eq.edge.to_id, direction),
            query=eq.query, documents=top,
            supports=supports, support_score=score))
    eg = sum(1 for r in records if r.documents)
    n = sum(1 for r in records if r.supports)
    return VerificationResult(records=tuple(records), n=n, eg=eg)


def format_digest(records: Sequence[EvidenceRecord]) -> str:
    """Bounded text summary of verification verdicts for the next round."""
    lines = []
    for record in records:
        verdict = "supported" if record.supports else "unsupported"
        if record.documents:
            lines.append(f"- {record.record_id}: {verdict}; "
                         f"top source: {record.documents[0].title!r}")
        else:
            lines.append(f"- {record.record_id}: {verdict}; no documents")
    return "\n".join(lines)
