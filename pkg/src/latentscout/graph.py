"""Causal graphs with latent variables: parsing, validation, Markov blankets.

The on-disk form is JSON: {"variables": [{"id", "name", "kind"}],
"edges": [{"from", "to", "oriented": bool}]}.  Graphs may carry unoriented
edges (Markov equivalence classes), but blanket extraction demands local
orientation unless the caller opts into the superset policy.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

from .errors import AmbiguousOrientationError, CycleError, GraphParseError

VALID_KINDS = ("observed", "latent")


@dataclass(frozen=True)
class Variable:
    id: str
    display_name: str
    kind: str
    description: Optional[str] = None

    @property
    def label(self) -> str:
        """Human-facing name; falls back to the id for unnamed latents."""
        return self.display_name if self.display_name else self.id


@dataclass(frozen=True)
class Edge:
    """A single edge; `oriented` False means the direction is unknown."""
    from_id: str
    to_id: str
    oriented: bool

    def key(self) -> Tuple[str, str]:
        """Unordered endpoint pair, for duplicate detection."""
        return tuple(sorted((self.from_id, self.to_id)))


@dataclass(frozen=True)
class MarkovBlanket:
    target: str
    members: FrozenSet[str]


@dataclass
class CausalGraph:
    variables: Dict[str, Variable]
    edges: List[Edge] = field(default_factory=list)

    def variable(self, var_id: str) -> Variable:
        if var_id not in self.variables:
            raise GraphParseError(f"unknown variable id {var_id!r}")
        return self.variables[var_id]

    def directed_edges(self) -> List[Edge]:
        return [e for e in self.edges if e.oriented]

    def unoriented_edges(self) -> List[Edge]:
        return [e for e in self.edges if not e.oriented]

    def latents(self) -> List[Variable]:
        return sorted(
            (v for v in self.variables.values() if v.kind == "latent"),
            key=lambda v: v.id)

    def parents(self, var_id: str) -> Set[str]:
        return {e.from_id for e in self.edges if e.oriented and e.to_id == var_id}

    def children(self, var_id: str) -> Set[str]:
        return {e.to_id for e in self.edges if e.oriented and e.from_id == var_id}


def parse_graph(document: str) -> CausalGraph:
    """Parse and validate a JSON graph document."""
    try:
        payload = json.loads(document)
    except json.JSONDecodeError as exc:
        raise GraphParseError(f"graph document is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise GraphParseError("graph document must be a JSON object")

    variables: Dict[str, Variable] = {}
    for spec in payload.get("variables", []):
        var_id = spec.get("id")
        if not var_id or not isinstance(var_id, str):
            raise GraphParseError(f"variable with missing or bad id: {spec!r}")
        if var_id in variables:
            raise GraphParseError(f"duplicate variable id {var_id!r}")
        kind = spec.get("kind")
        if kind not in VALID_KINDS:
            raise GraphParseError(f"variable {var_id!r} has invalid kind {kind!r}")
        name = spec.get("name", "")
        if kind == "observed" and not name:
            raise GraphParseError(f"observed variable {var_id!r} must be named")
        variables[var_id] = Variable(
            id=var_id, display_name=name, kind=kind,
            description=spec.get("description"))

    edges: List[Edge] = []
    seen_directed: Set[Tuple[str, str]] = set()
    unoriented_pairs: Set[Tuple[str, str]] = set()
    directed_pairs: Set[Tuple[str, str]] = set()
    for spec in payload.get("edges", []):
        from_id, to_id = spec.get("from"), spec.get("to")
        for endpoint in (from_id, to_id):
            if endpoint not in variables:
                raise GraphParseError(f"edge endpoint {endpoint!r} is not a declared variable")
        if from_id == to_id:
            raise GraphParseError(f"self-loop on {from_id!r}")
        edge = Edge(from_id=from_id, to_id=to_id, oriented=bool(spec.get("oriented", True)))
        # Opposite directed edges are NOT duplicates here; they form a
        # 2-cycle, which the acyclicity check reports as such.
        if edge.oriented:
            duplicate = ((from_id, to_id) in seen_directed
                         or edge.key() in unoriented_pairs)
        else:
            duplicate = (edge.key() in unoriented_pairs
                         or edge.key() in directed_pairs)
        if duplicate:
            raise GraphParseError(
                f"duplicate edge between {from_id!r} and {to_id!r}")
        if edge.oriented:
            seen_directed.add((from_id, to_id))
            directed_pairs.add(edge.key())
        else:
            unoriented_pairs.add(edge.key())
        edges.append(edge)

    graph = CausalGraph(variables=variables, edges=edges)
    _check_acyclic(graph)
    return graph


def load_graph(path) -> CausalGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_graph(fh.read())


def _check_acyclic(graph: CausalGraph) -> None:
    """Kahn's algorithm over the directed part; cycles name an offender."""
    indegree = {v: 0 for v in graph.variables}
    out: Dict[str, List[str]] = {v: [] for v in graph.variables}
    for e in graph.directed_edges():
        indegree[e.to_id] += 1
        out[e.from_id].append(e.to_id)
    queue = [v for v, d in indegree.items() if d == 0]
    seen = 0
    while queue:
        node = queue.pop()
        seen += 1
        for nxt in out[node]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                queue.append(nxt)
    if seen != len(indegree):
        offenders = sorted(v for v, d in indegree.items() if d > 0)
        raise CycleError(f"directed cycle through {offenders[0]!r}")


def serialize_graph(graph: CausalGraph) -> str:
    """Canonical form: sorted keys, variables by id, edges lexicographic."""
    payload = {
        "edges": [
            {"from": e.from_id, "oriented": e.oriented, "to": e.to_id}
            for e in sorted(graph.edges, key=lambda e: (e.from_id, e.to_id, e.oriented))
        ],
        "variables": [
            {
                k: v for k, v in (
                    ("id", var.id),
                    ("kind", var.kind),
                    ("name", var.display_name),
                ) if v is not None
            }
            for var in sorted(graph.variables.values(), key=lambda v: v.id)
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def markov_blanket(graph: CausalGraph, target: str,
                   policy: str = "strict") -> MarkovBlanket:
    """Parents, children, and parents-of-children of `target`.

    Under the strict policy any unoriented edge touching the target or one of
    its children makes the blanket ill-defined and raises.  Under the superset
    policy every unoriented edge is counted in both orientations, yielding a
    superset of every consistent orientation's blanket.
    """
    graph.variable(target)
    if policy not in ("strict", "superset"):
        raise GraphParseError(f"unknown blanket policy {policy!r}")

    if policy == "strict":
        children = graph.children(target)
        for e in graph.unoriented_edges():
            touched = {e.from_id, e.to_id}
            if target in touched or (touched & children):
                raise AmbiguousOrientationError(
                    f"unoriented edge {e.from_id!r}-{e.to_id!r} blocks the blanket "
                    f"of {target!r}; orient it or use the superset policy")
        parents = graph.parents(target)
        spouses: Set[str] = set()
        for child in children:
            spouses |= graph.parents(child)
    else:
        pairs = [(e.from_id, e.to_id) for e in graph.directed_edges()]
        for e in graph.unoriented_edges():
            pairs.append((e.from_id, e.to_id))
            pairs.append((e.to_id, e.from_id))
        parents = {a for a, b in pairs if b == target}
        children = {b for a, b in pairs if a == target}
        spouses = {a for a, b in pairs if b in children}

    members = (parents | children | spouses) - {target}
    return MarkovBlanket(target=target, members=frozenset(members))


def latent_queries(graph: CausalGraph, policy: str = "strict"
                   ) -> List[Tuple[Variable, MarkovBlanket]]:
    """One (latent, blanket) pair per latent variable, in id order."""
    return [(v, markov_blanket(graph, v.id, policy)) for v in graph.latents()]


def latent_incident_edges(graph: CausalGraph) -> List[Edge]:
    """Edges with at least one latent endpoint; the count is the EA statistic."""
    latent_ids = {v.id for v in graph.latents()}
    return [e for e in graph.edges
            if e.from_id in latent_ids or e.to_id in latent_ids]
