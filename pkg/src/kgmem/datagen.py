"""Triplet and traversal-sequence dataset generation."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Union

import numpy as np

from kgmem.graph import ExtendedGraph, KnowledgeGraph, bfs_nodes


class DatasetError(ValueError):
    pass


class Triplet(NamedTuple):
    concept: str
    property: str
    related: str


@dataclass(frozen=True)
class TripletSet:
    items: tuple[Triplet, ...]
    seed: int

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


@dataclass(frozen=True)
class Sequence:
    """Alternating ``node, edge, node, ..., node`` label path."""

    elements: tuple[str, ...]

    @property
    def nodes(self) -> tuple[str, ...]:
        return self.elements[::2]

    @property
    def edges(self) -> tuple[str, ...]:
        return self.elements[1::2]

    def steps(self):
        """Yield consecutive ``(node, edge, next_node)`` triples."""
        el = self.elements
        for i in range(0, len(el) - 2, 2):
            yield el[i], el[i + 1], el[i + 2]

    def __len__(self) -> int:
        return len(self.elements)


@dataclass(frozen=True)
class SequenceGenParams:
    count: int
    min_nodes: int = 4
    max_nodes: int = 6
    bfs_depth: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.min_nodes <= self.max_nodes:
            raise DatasetError("need 2 <= min_nodes <= max_nodes")
        if self.bfs_depth < 1:
            raise DatasetError("bfs_depth must be >= 1")
        if self.count < 0:
            raise DatasetError("count must be >= 0")


def gen_triplets(g: KnowledgeGraph, seed: int, limit: int | None = None) -> TripletSet:
    """One triplet per ``(concept, property)`` key, target drawn uniformly."""
    rng = np.random.default_rng(seed)
    targets: dict[tuple[str, str], list[str]] = defaultdict(list)
    for s, p, t in g.edges:
        targets[(s, p)].append(t)
    keys = sorted(targets)
    if limit is not None and limit > len(keys):
        raise DatasetError(
            f"requested {limit} triplets but only {len(keys)} (concept, property) pairs are available"
        )
    items = []
    for key in keys:
        options = sorted(targets[key])
        items.append(Triplet(key[0], key[1], options[int(rng.integers(len(options)))]))
    if limit is not None:
        keep = np.sort(rng.choice(len(items), size=limit, replace=False))
        items = [items[i] for i in keep]
    order = rng.permutation(len(items))
    return TripletSet(tuple(items[i] for i in order), seed)


def _attempt_rng(seed: int, attempt: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), attempt])))


def walk_once(g: ExtendedGraph, params: SequenceGenParams, attempt: int) -> Sequence:
    """Run the traversal for one attempt index; may return a short walk."""
    rng = _attempt_rng(params.seed, attempt)
    nodes = g.sorted_nodes
    start = nodes[int(rng.integers(len(nodes)))]
    edge_limit = int(rng.integers(params.min_nodes - 1, params.max_nodes))
    # a walk of edge_limit steps cannot leave the ball of that radius, so the
    # subgraph restriction only binds when the BFS depth is smaller
    allowed = bfs_nodes(g, start, params.bfs_depth) if params.bfs_depth < edge_limit else None
    adj = g.adjacency
    visited: set[tuple[str, str]] = set()
    elements = [start]
    cur = start
    for _ in range(edge_limit):
        options = [
            (p, t)
            for p, t in adj[cur]
            if (cur, p) not in visited and (allowed is None or t in allowed)
        ]
        if not options:
            break
        p, t = options[int(rng.integers(len(options)))]
        visited.add((cur, p))
        elements += [p, t]
        cur = t
    return Sequence(tuple(elements))


def gen_sequences(
    g: ExtendedGraph, params: SequenceGenParams, trace: bool = False
) -> Union[list[Sequence], tuple[list[Sequence], list[int]]]:
    """Random traversals of BFS-bounded subgraphs with unique ``(node, edge)`` steps.

    Attempt ``k`` draws from its own stream keyed by ``(seed, k)``; walks that
    end with fewer than ``min_nodes`` nodes are dropped and the next attempt
    index is tried. With ``trace=True`` the accepted attempt indices are
    returned alongside the sequences.
    """
    if not g.nodes:
        raise DatasetError("graph has no nodes")
    out: list[Sequence] = []
    used: list[int] = []
    budget = params.count * 1000
    attempt = 0
    while len(out) < params.count:
        if attempt >= budget:
            raise DatasetError(
                f"only {len(out)} of {params.count} sequences with >= {params.min_nodes} nodes "
                f"after {budget} attempts; graph too sparse"
            )
        seq = walk_once(g, params, attempt)
        if len(seq.nodes) >= params.min_nodes:
            out.append(seq)
            used.append(attempt)
        attempt += 1
    return (out, used) if trace else out


def check_sequence(seq: Sequence, g: KnowledgeGraph, min_nodes: int, max_nodes: int) -> list[str]:
    """Return the list of violated invariants (empty when valid)."""
    problems = []
    el = seq.elements
    if len(el) % 2 != 1:
        problems.append("even element count breaks node/edge alternation")
    elif any(e not in g.properties for e in el[1::2]) or any(n not in g.nodes for n in el[::2]):
        problems.append("alternation")
    edges = set(g.edges)
    if any(step not in edges for step in seq.steps()):
        problems.append("edge membership")
    pairs = [(n, e) for n, e, _ in seq.steps()]
    if len(pairs) != len(set(pairs)):
        problems.append("repeated (node, edge) pair")
    if not min_nodes <= len(seq.nodes) <= max_nodes:
        problems.append("node count out of bounds")
    return problems


def _is_triplets(data) -> bool:
    if isinstance(data, TripletSet):
        return True
    return bool(data) and isinstance(data[0], Triplet)


def dataset_stats(data: Union[TripletSet, list[Sequence], Iterable]) -> dict:
    """Counts, distinct labels, length histogram and prediction totals.

    ``max_attainable`` is the number of predictions a perfect teacher-forced
    memorizer can get right: identical prefixes followed by different nodes
    can only be satisfied once per prefix.
    """
    data = list(data)
    if not data:
        return {
            "kind": None, "count": 0, "distinct_labels": 0, "distinct_nodes": 0,
            "distinct_properties": 0, "length_histogram": {}, "n_predictions": 0,
            "duplicates": 0, "max_attainable": 0,
        }
    if _is_triplets(data):
        rows = [tuple(t) for t in data]
        node_labels = {x for t in data for x in (t.concept, t.related)}
        prop_labels = {t.property for t in data}
        hist = {3: len(rows)}
        prefixes = [(r[:2], r[2]) for r in rows]
        kind = "triplets"
    else:
        rows = [s.elements for s in data]
        node_labels = {x for s in data for x in s.nodes}
        prop_labels = {x for s in data for x in s.edges}
        hist = dict(sorted(Counter(len(s.nodes) for s in data).items()))
        prefixes = [(r[:i], r[i]) for r in rows for i in range(2, len(r), 2)]
        kind = "sequences"
    by_prefix: dict[tuple, Counter] = defaultdict(Counter)
    for prefix, nxt in prefixes:
        by_prefix[prefix][nxt] += 1
    return {
        "kind": kind,
        "count": len(rows),
        "distinct_labels": len(node_labels | prop_labels),
        "distinct_nodes": len(node_labels),
        "distinct_properties": len(prop_labels),
        "length_histogram": hist,
        "n_predictions": len(prefixes),
        "duplicates": len(rows) - len(set(rows)),
        "max_attainable": sum(c.most_common(1)[0][1] for c in by_prefix.values()),
    }


def dump_dataset(data) -> str:
    rows = [tuple(t) for t in data] if _is_triplets(list(data)) else [s.elements for s in data]
    for r in rows:
        for label in r:
            if "\t" in label or "\n" in label or "\r" in label:
                raise DatasetError(f"label {label!r} contains a tab or newline")
    return "".join("\t".join(r) + "\n" for r in rows)


def load_dataset(text: str, kind: str, seed: int = 0) -> Union[TripletSet, list[Sequence]]:
    rows = [ln.split("\t") for ln in text.split("\n") if ln]
    if kind == "triplets":
        for i, r in enumerate(rows, start=1):
            if len(r) != 3:
                raise DatasetError(f"line {i}: triplet needs 3 fields, got {len(r)}")
        return TripletSet(tuple(Triplet(*r) for r in rows), seed)
    if kind == "sequences":
        for i, r in enumerate(rows, start=1):
            if len(r) % 2 != 1:
                raise DatasetError(f"line {i}: sequence needs an odd number of fields")
        return [Sequence(tuple(r)) for r in rows]
    raise DatasetError(f"unknown dataset kind {kind!r}")
