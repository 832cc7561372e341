"""Path diagrams and the purely graphical tests run on them.

A :class:`Dag` carries a kind for every vertex (observed, latent or
selection).  Everything in this module reads structure only; nothing here
looks at numbers.
"""

from __future__ import annotations

import enum
import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .exceptions import ModelError


class Kind(str, enum.Enum):
    OBSERVED = "observed"
    LATENT = "latent"
    SELECTION = "selection"


class Relation(str, enum.Enum):
    PARENTS = "parents"
    CHILDREN = "children"
    ANCESTORS = "ancestors"
    DESCENDANTS = "descendants"
    NON_DESCENDANTS = "nondescendants"


class Mode(str, enum.Enum):
    COVARIANCE = "covariance"
    CONCENTRATION = "concentration"


@dataclass(frozen=True)
class Dag:
    """Directed acyclic graph with typed vertices.

    Parameters
    ----------
    vertices:
        ``(name, kind)`` pairs.  The order is kept and used wherever a
        deterministic ordering is needed.
    edges:
        ``(parent, child)`` pairs.
    """

    vertices: tuple[tuple[str, Kind], ...]
    edges: frozenset[tuple[str, str]]
    _parents: Mapping[str, frozenset[str]] = field(init=False, repr=False, compare=False)
    _children: Mapping[str, frozenset[str]] = field(init=False, repr=False, compare=False)
    _order: tuple[str, ...] = field(init=False, repr=False, compare=False)

    def __init__(self, vertices: Iterable, edges: Iterable[tuple[str, str]] = ()):
        verts = []
        for v in vertices:
            if isinstance(v, str):
                verts.append((v, Kind.OBSERVED))
            else:
                name, kind = v
                verts.append((name, Kind(kind)))
        names = [n for n, _ in verts]
        if len(set(names)) != len(names):
            raise ModelError("vertex names must be unique")
        edges = frozenset((str(a), str(b)) for a, b in edges)
        known = set(names)
        for a, b in edges:
            if a not in known or b not in known:
                raise ModelError(f"edge {a}->{b} uses an undeclared vertex")
            if a == b:
                raise ModelError(f"self loop on {a}")
        parents = {n: set() for n in names}
        children = {n: set() for n in names}
        for a, b in edges:
            parents[b].add(a)
            children[a].add(b)
        kinds = dict(verts)
        for n in names:
            if kinds[n] is Kind.SELECTION and children[n]:
                raise ModelError(f"selection vertex {n} must not have children")
        order = _topological_order(names, parents, children)
        object.__setattr__(self, "vertices", tuple(verts))
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "_parents", {n: frozenset(p) for n, p in parents.items()})
        object.__setattr__(self, "_children", {n: frozenset(c) for n, c in children.items()})
        object.__setattr__(self, "_order", order)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.vertices)

    @property
    def topological_order(self) -> tuple[str, ...]:
        return self._order

    def kind(self, v: str) -> Kind:
        self._require(v)
        return dict(self.vertices)[v]

    def of_kind(self, kind: Kind) -> tuple[str, ...]:
        return tuple(n for n, k in self.vertices if k is kind)

    @property
    def observed(self) -> tuple[str, ...]:
        return self.of_kind(Kind.OBSERVED)

    @property
    def latent(self) -> tuple[str, ...]:
        return self.of_kind(Kind.LATENT)

    @property
    def selection(self) -> tuple[str, ...]:
        return self.of_kind(Kind.SELECTION)

    def parents(self, v: str) -> frozenset[str]:
        self._require(v)
        return self._parents[v]

    def children(self, v: str) -> frozenset[str]:
        self._require(v)
        return self._children[v]

    def __contains__(self, v: object) -> bool:
        return v in self._parents

    def _require(self, *vs: str) -> None:
        for v in vs:
            if v not in self._parents:
                raise ModelError(f"unknown vertex {v!r}")

    def without_edges_out_of(self, v: str) -> "Dag":
        self._require(v)
        return Dag(self.vertices, {(a, b) for a, b in self.edges if a != v})

    def relabel(self, mapping: Mapping[str, str]) -> "Dag":
        return Dag(
            [(mapping.get(n, n), k) for n, k in self.vertices],
            {(mapping.get(a, a), mapping.get(b, b)) for a, b in self.edges},
        )

    def to_json(self) -> dict:
        return {
            "vertices": [{"name": n, "kind": k.value} for n, k in self.vertices],
            "edges": [list(e) for e in sorted(self.edges, key=self._edge_key)],
        }

    def _edge_key(self, e: tuple[str, str]) -> tuple[int, int]:
        pos = {n: i for i, n in enumerate(self.names)}
        return pos[e[0]], pos[e[1]]

    @classmethod
    def from_json(cls, doc: Mapping) -> "Dag":
        try:
            vertices = [(v["name"], Kind(v.get("kind", "observed"))) for v in doc["vertices"]]
            edges = [(a, b) for a, b in doc.get("edges", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"malformed graph document: {exc}") from exc
        return cls(vertices, edges)


def _topological_order(names, parents, children) -> tuple[str, ...]:
    indeg = {n: len(parents[n]) for n in names}
    pos = {n: i for i, n in enumerate(names)}
    ready = [n for n in names if indeg[n] == 0]
    order = []
    while ready:
        ready.sort(key=pos.__getitem__)
        n = ready.pop(0)
        order.append(n)
        for c in children[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if len(order) != len(names):
        raise ModelError("graph contains a directed cycle")
    return tuple(order)


def load_graph(path: str | Path) -> Dag:
    with open(path) as fh:
        return Dag.from_json(json.load(fh))


def relatives(g: Dag, v: str, relation: Relation | str) -> frozenset[str]:
    """Parents, children, ancestors, descendants or non-descendants of ``v``.

    Ancestors and descendants exclude ``v`` itself.
    """
    relation = Relation(relation)
    g._require(v)
    if relation is Relation.PARENTS:
        return g.parents(v)
    if relation is Relation.CHILDREN:
        return g.children(v)
    if relation is Relation.ANCESTORS:
        return frozenset(_closure(g._parents, [v]) - {v})
    desc = _closure(g._children, [v]) - {v}
    if relation is Relation.DESCENDANTS:
        return frozenset(desc)
    return frozenset(set(g.names) - desc - {v})


def _closure(step: Mapping[str, Iterable[str]], start: Iterable[str]) -> set[str]:
    seen = set(start)
    stack = list(seen)
    while stack:
        for u in step[stack.pop()]:
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return seen


def _as_set(g: Dag, s) -> frozenset[str]:
    if isinstance(s, str):
        s = {s}
    s = frozenset(s)
    g._require(*s)
    return s


def _reach(g: Dag, sources: frozenset[str], given: frozenset[str]):
    """Breadth-first search over (vertex, direction) states.

    ``"up"`` means the trail arrived from a child, ``"down"`` from a parent.
    Returns the predecessor map of visited states.
    """
    anc_given = _closure(g._parents, given)
    start = [(a, "up") for a in sorted(sources)]
    prev = {s: None for s in start}
    queue = deque(start)
    while queue:
        state = queue.popleft()
        v, d = state
        nxt = []
        if d == "up" and v not in given:
            nxt += [(p, "up") for p in g._parents[v]]
            nxt += [(c, "down") for c in g._children[v]]
        elif d == "down":
            if v not in given:
                nxt += [(c, "down") for c in g._children[v]]
            if v in anc_given:
                nxt += [(p, "up") for p in g._parents[v]]
        for s in nxt:
            if s not in prev:
                prev[s] = state
                queue.append(s)
    return prev


def connecting_trail(g: Dag, a, b, given=()) -> list[str] | None:
    """One trail d-connecting ``a`` to ``b`` given ``given``, or ``None``."""
    a, b, given = _as_set(g, a), _as_set(g, b), _as_set(g, given)
    _check_disjoint(a, b, given)
    prev = _reach(g, a, given)
    state = next((s for s in prev if s[0] in b), None)
    if state is None:
        return None
    trail = []
    while state is not None:
        trail.append(state[0])
        state = prev[state]
    return trail[::-1]


def _check_disjoint(a, b, c) -> None:
    if a & b or a & c or b & c:
        raise ModelError("d-separation sets must be pairwise disjoint")


def d_separated(g: Dag, a, b, given=()) -> bool:
    """True iff ``given`` blocks every trail between ``a`` and ``b``.

    Each argument may be a single vertex name or an iterable of names.
    """
    a, b, given = _as_set(g, a), _as_set(g, b), _as_set(g, given)
    _check_disjoint(a, b, given)
    prev = _reach(g, a, given)
    return not any(v in b for v, _ in prev)


def back_door_admissible(g: Dag, x: str, y: str, adjust=()) -> bool:
    """Back-door criterion for adjusting ``adjust`` when estimating x -> y."""
    adjust = _as_set(g, adjust)
    g._require(x, y)
    if x == y or x in adjust or y in adjust:
        raise ModelError("x, y and the adjustment set must be distinct")
    if adjust & relatives(g, x, Relation.DESCENDANTS):
        return False
    return d_separated(g.without_edges_out_of(x), {x}, {y}, adjust)


# -- undirected helpers -------------------------------------------------------

def _adjacency(edges: Iterable, vertices: Iterable | None = None) -> dict:
    adj: dict = {v: set() for v in (vertices or ())}
    for e in edges:
        a, b = tuple(e)
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    return adj


def components(adj: Mapping) -> list[list]:
    seen = set()
    out = []
    for v in adj:
        if v in seen:
            continue
        comp = sorted(_closure(adj, [v]), key=list(adj).index)
        seen.update(comp)
        out.append(comp)
    return out


def find_odd_cycle(adj: Mapping, start=None) -> list | None:
    """Return the vertex sequence of an odd cycle, or ``None`` if bipartite.

    When ``start`` is given only its connected component is searched.
    """
    roots = [start] if start is not None else list(adj)
    colour: dict = {}
    parent: dict = {}
    for r in roots:
        if r in colour:
            continue
        colour[r] = 0
        parent[r] = None
        queue = deque([r])
        while queue:
            u = queue.popleft()
            for v in sorted(adj[u], key=str):
                if v not in colour:
                    colour[v] = 1 - colour[u]
                    parent[v] = u
                    queue.append(v)
                elif colour[v] == colour[u]:
                    return _cycle_through(parent, u, v)
    return None


def _cycle_through(parent, u, v) -> list:
    # u and v share a BFS colour; splice their tree paths at the lowest common ancestor
    pu = [u]
    while parent[pu[-1]] is not None:
        pu.append(parent[pu[-1]])
    pv = [v]
    while parent[pv[-1]] is not None:
        pv.append(parent[pv[-1]])
    on_pv = set(pv)
    i = next(k for k, w in enumerate(pu) if w in on_pv)
    j = pv.index(pu[i])
    return pu[: i + 1][::-1] + pv[:j]


def has_odd_cycle(edges: Iterable, vertices: Iterable | None = None) -> bool:
    """True iff the undirected graph is not bipartite."""
    return find_odd_cycle(_adjacency(edges, vertices)) is not None


# -- zero patterns -------------------------------------------------------------

@dataclass(frozen=True)
class ZeroPattern:
    """Structural zeros of a (conditional) covariance or concentration matrix.

    ``absent`` holds the unordered pairs whose entry vanishes; the
    complementary graph of the nonzero-entry graph therefore has exactly
    these pairs as edges.
    """

    variables: tuple[str, ...]
    absent: frozenset[frozenset[str]]
    mode: Mode = Mode.COVARIANCE

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        pairs = frozenset(frozenset(p) for p in self.absent)
        known = set(self.variables)
        for p in pairs:
            if len(p) != 2:
                raise ModelError("zero pattern pairs must join two distinct variables")
            if not p <= known:
                raise ModelError(f"pair {sorted(p)} is outside the variable list")
        object.__setattr__(self, "absent", pairs)
        object.__setattr__(self, "mode", Mode(self.mode))

    def complement_adjacency(self) -> dict[str, set[str]]:
        return _adjacency(self.absent, self.variables)

    def relabel(self, mapping: Mapping[str, str]) -> "ZeroPattern":
        return ZeroPattern(
            tuple(mapping[v] for v in self.variables),
            {frozenset(mapping[v] for v in p) for p in self.absent},
            self.mode,
        )


def zero_pattern(g: Dag, variables, given=(), mode: Mode | str = Mode.COVARIANCE) -> ZeroPattern:
    """Read the structural zeros among ``variables`` off the graph.

    Relies on faithfulness: an entry vanishes exactly when the matching
    d-separation holds.
    """
    mode = Mode(mode)
    variables = tuple(variables)
    given = _as_set(g, given)
    g._require(*variables)
    if set(variables) & given:
        raise ModelError("variables and conditioning set overlap")
    absent = set()
    for a, b in itertools.combinations(variables, 2):
        sep = set(given)
        if mode is Mode.CONCENTRATION:
            sep |= set(variables) - {a, b}
        if d_separated(g, {a}, {b}, sep):
            absent.add(frozenset((a, b)))
    return ZeroPattern(variables, absent, mode)


def factor_identifiable(p: ZeroPattern) -> bool:
    """Odd-cycle condition for recovering a rank-one term from ``p``'s zeros.

    Every connected component of the graph of structural zeros must be
    non-bipartite.  A variable that touches no structural zero leaves its
    loading free, so it makes the pattern unidentifiable.
    """
    if len(p.variables) < 3:
        return False
    adj = p.complement_adjacency()
    if any(not nbrs for nbrs in adj.values()):
        return False
    return all(find_odd_cycle(adj, comp[0]) is not None for comp in components(adj))
