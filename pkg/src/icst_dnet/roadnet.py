"""Road network representation and road-pair enumeration.

The network is an undirected, unweighted graph over ``N`` roads. Causality is
learned per *road pair*: an unordered pair of roads at graph distance 1 or 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, RangeError


@dataclass(frozen=True)
class RoadNetwork:
    """Undirected road graph with a boolean adjacency matrix.

    Immutable after construction; safe to share across threads.
    """

    num_roads: int
    edges: frozenset  # of (m, n) tuples with m < n
    adjacency: np.ndarray = field(repr=False)  # bool (N, N), symmetric, zero diagonal

    def __post_init__(self):
        adj = self.adjacency
        assert adj.shape == (self.num_roads, self.num_roads)
        assert adj.dtype == bool
        assert not adj.diagonal().any()
        assert (adj == adj.T).all()

    @property
    def num_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class RoadPairSet:
    """Unordered road pairs (m < n) at graph distance 1 or 2.

    ``order_tags[k]`` is 1 or 2: the minimal distance between the roads of
    ``pairs[k]``.
    """

    pairs: tuple  # of (m, n), lexicographically sorted
    order_tags: tuple  # of int in {1, 2}, aligned with pairs

    def __len__(self) -> int:
        return len(self.pairs)

    def index_array(self) -> np.ndarray:
        """Pairs as an int64 array of shape (n_pairs, 2)."""
        return np.array(self.pairs, dtype=np.int64).reshape(len(self.pairs), 2)


def make_network(num_roads: int, edges) -> RoadNetwork:
    """Build a RoadNetwork from an iterable of (m, n) index pairs.

    Self-loops are rejected, duplicates (in either orientation) deduplicated.
    """
    adj = np.zeros((num_roads, num_roads), dtype=bool)
    canon = set()
    for m, n in edges:
        m, n = int(m), int(n)
        if m == n:
            raise ParseError(f"self edge ({m},{n}) is not allowed")
        if not (0 <= m < num_roads and 0 <= n < num_roads):
            raise RangeError(f"edge ({m},{n}) references a road outside [0, {num_roads})")
        a, b = (m, n) if m < n else (n, m)
        canon.add((a, b))
        adj[a, b] = adj[b, a] = True
    return RoadNetwork(num_roads=num_roads, edges=frozenset(canon), adjacency=adj)


def load_network(path, num_roads: int | None = None) -> RoadNetwork:
    """Load a network from an edge-list CSV (``m,n`` per line) or JSON file.

    The JSON form is ``{"num_roads": N, "edges": [[m, n], ...]}``. For CSV,
    ``num_roads`` defaults to ``max index + 1``; an empty CSV therefore needs
    an explicit ``num_roads``.
    """
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        doc = json.loads(text)
        n = int(doc["num_roads"])
        return make_network(n, [(int(m), int(v)) for m, v in doc["edges"]])

    edges = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if lineno == 1 and not all(_is_int(p) for p in parts):
            continue  # header row
        if len(parts) != 2 or not all(_is_int(p) for p in parts):
            raise ParseError(f"{path}:{lineno}: expected 'm,n', got {line!r}")
        edges.append((int(parts[0]), int(parts[1])))
    if num_roads is None:
        if not edges:
            raise ParseError(f"{path}: empty edge list; pass num_roads explicitly")
        num_roads = max(max(m, n) for m, n in edges) + 1
    return make_network(num_roads, edges)


def _is_int(s: str) -> bool:
    try:
        int(s)
        return True
    except ValueError:
        return False


def neighbors_up_to_order(net: RoadNetwork, road: int, max_order: int = 2) -> set:
    """All roads at graph distance 1..max_order from ``road``, as (road, order).

    The order is the minimal distance; the road itself is excluded.
    """
    if not 0 <= road < net.num_roads:
        raise RangeError(f"road {road} outside [0, {net.num_roads})")
    dist = {road: 0}
    frontier = [road]
    for order in range(1, max_order + 1):
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(net.adjacency[u]):
                v = int(v)
                if v not in dist:
                    dist[v] = order
                    nxt.append(v)
        frontier = nxt
    return {(r, d) for r, d in dist.items() if d > 0}


def enumerate_road_pairs(
    net: RoadNetwork,
    targets=None,
    max_pairs: int | None = None,
) -> RoadPairSet:
    """Enumerate the road-pair set: unordered pairs at distance <= 2.

    A pair qualifies when at least one endpoint is a target (default: all
    roads). Pairs are deduplicated, sorted lexicographically, and optionally
    truncated to ``max_pairs`` (deterministic, keeps the lexicographic head).
    """
    if targets is None:
        targets = range(net.num_roads)
    found = {}
    for t in targets:
        for other, order in neighbors_up_to_order(net, int(t), max_order=2):
            a, b = (int(t), other) if t < other else (other, int(t))
            prev = found.get((a, b))
            if prev is None or order < prev:
                found[(a, b)] = order
    keys = sorted(found)
    if max_pairs is not None:
        keys = keys[:max_pairs]
    return RoadPairSet(pairs=tuple(keys), order_tags=tuple(found[k] for k in keys))
