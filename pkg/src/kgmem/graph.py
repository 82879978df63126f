"""Knowledge-graph storage, preprocessing and traversal primitives.

Graphs are immutable. Edges are kept as a sorted tuple of
``(source, property, target)`` triples so every downstream consumer sees the
same order regardless of how the graph was built.
"""

from __future__ import annotations

import re
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np

REVERSE_SUFFIX = "_rev"

Edge = tuple[str, str, str]


class GraphError(ValueError):
    """Raised for malformed graph input or invalid graph queries."""


@dataclass(frozen=True)
class KnowledgeGraph:
    nodes: frozenset[str]
    properties: frozenset[str]
    edges: tuple[Edge, ...]

    @classmethod
    def from_edges(cls, edges: Iterable[Edge]) -> "KnowledgeGraph":
        uniq = tuple(sorted(set(edges)))
        nodes = frozenset(n for s, _, t in uniq for n in (s, t))
        props = frozenset(p for _, p, _ in uniq)
        return cls(nodes, props, uniq)

    @cached_property
    def adjacency(self) -> dict[str, tuple[tuple[str, str], ...]]:
        adj: dict[str, list[tuple[str, str]]] = defaultdict(list)
        for s, p, t in self.edges:
            adj[s].append((p, t))
        return {n: tuple(sorted(adj.get(n, ()))) for n in self.nodes}

    @cached_property
    def sorted_nodes(self) -> tuple[str, ...]:
        return tuple(sorted(self.nodes))

    def __len__(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class ExtendedGraph(KnowledgeGraph):
    """Graph with standardized labels and a reverse edge for every forward edge.

    ``reverse`` is aligned with ``edges``: ``reverse[i]`` marks edge ``i`` as
    an added reverse edge.
    """

    reverse: tuple[bool, ...] = field(default=())

    def forward_edges(self) -> tuple[Edge, ...]:
        return tuple(e for e, r in zip(self.edges, self.reverse) if not r)

    def induced(self, keep: frozenset[str]) -> "ExtendedGraph":
        pairs = [(e, r) for e, r in zip(self.edges, self.reverse) if e[0] in keep and e[2] in keep]
        props = frozenset(e[1] for e, _ in pairs)
        return ExtendedGraph(
            nodes=keep,
            properties=props,
            edges=tuple(e for e, _ in pairs),
            reverse=tuple(r for _, r in pairs),
        )


@dataclass(frozen=True)
class SynthGraphParams:
    n_nodes: int
    n_properties: int
    mean_out_degree: float
    seed: int

    def __post_init__(self):
        if self.n_nodes < 2:
            raise GraphError("n_nodes must be >= 2")
        if self.n_properties < 1:
            raise GraphError("n_properties must be >= 1")
        if not self.mean_out_degree > 0:
            raise GraphError("mean_out_degree must be > 0")


def standardize_label(label: str) -> str:
    """Lowercase and collapse whitespace runs into single underscores."""
    return re.sub(r"\s+", "_", label.strip().lower())


def load_edge_list(text: str) -> KnowledgeGraph:
    """Parse a tab-separated ``source<TAB>property<TAB>target`` edge list.

    Blank lines and lines starting with ``#`` are skipped. Duplicate triples
    collapse to one edge.
    """
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise GraphError(f"line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
        if any(not f.strip() for f in fields):
            raise GraphError(f"line {lineno}: empty field")
        edges.append(tuple(f.strip() for f in fields))
    return KnowledgeGraph.from_edges(edges)


def load_banned(text: str) -> set[str]:
    return {ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")}


def dump_edge_list(g: KnowledgeGraph) -> str:
    return "".join(f"{s}\t{p}\t{t}\n" for s, p, t in g.edges)


def filter_properties(g: KnowledgeGraph, banned: Iterable[str]) -> KnowledgeGraph:
    banned = set(banned)
    if not banned & g.properties:
        return g
    return KnowledgeGraph.from_edges(e for e in g.edges if e[1] not in banned)


def extend_bidirectional(g: KnowledgeGraph) -> ExtendedGraph:
    """Standardize labels and add ``(b, p_rev, a)`` for every ``(a, p, b)``."""
    std = {(standardize_label(s), standardize_label(p), standardize_label(t)) for s, p, t in g.edges}
    for p in sorted({p for _, p, _ in std}):
        if p.endswith(REVERSE_SUFFIX):
            raise GraphError(f"property {p!r} already ends with reverse marker {REVERSE_SUFFIX!r}")
    tagged = {(e, False) for e in std}
    tagged |= {((t, p + REVERSE_SUFFIX, s), True) for s, p, t in std}
    ordered = sorted(tagged)
    edges = tuple(e for e, _ in ordered)
    return ExtendedGraph(
        nodes=frozenset(n for s, _, t in edges for n in (s, t)),
        properties=frozenset(p for _, p, _ in edges),
        edges=edges,
        reverse=tuple(r for _, r in ordered),
    )


def synth_kg(params: SynthGraphParams) -> KnowledgeGraph:
    """Random graph with Poisson out-degrees and uniformly drawn properties.

    A node whose Poisson draw is zero still gets one outgoing edge, so every
    node is the source of at least one edge.
    """
    rng = np.random.default_rng(params.seed)
    n = params.n_nodes
    width = len(str(n - 1))
    pwidth = len(str(params.n_properties - 1))
    names = [f"n{i:0{width}d}" for i in range(n)]
    props = [f"p{j:0{pwidth}d}" for j in range(params.n_properties)]

    edges: set[tuple[int, int, int]] = set()
    degrees = np.maximum(rng.poisson(params.mean_out_degree, size=n), 1)
    for i in range(n):
        for _ in range(int(degrees[i])):
            j = int(rng.integers(n - 1))
            edges.add((i, int(rng.integers(params.n_properties)), j + (j >= i)))
    return KnowledgeGraph.from_edges((names[s], props[p], names[t]) for s, p, t in edges)


def neighbors(g: KnowledgeGraph, node: str) -> tuple[tuple[str, str], ...]:
    try:
        return g.adjacency[node]
    except KeyError:
        raise GraphError(f"unknown node {node!r}") from None


def bfs_nodes(g: KnowledgeGraph, start: str, depth: int) -> frozenset[str]:
    if start not in g.nodes:
        raise GraphError(f"unknown node {start!r}")
    if depth < 0:
        raise GraphError("depth must be >= 0")
    adj = g.adjacency
    seen = {start}
    frontier = deque([(start, 0)])
    while frontier:
        node, d = frontier.popleft()
        if d == depth:
            continue
        for _, nxt in adj[node]:
            if nxt not in seen:
                seen.add(nxt)
                frontier.append((nxt, d + 1))
    return frozenset(seen)


def bfs_subgraph(g: ExtendedGraph, start: str, depth: int) -> ExtendedGraph:
    """Subgraph induced by the nodes within ``depth`` hops of ``start``."""
    return g.induced(bfs_nodes(g, start, depth))
