"""Weighted geodesic distance on the implicit neighbor graph of nets."""

from __future__ import annotations

import heapq
import math
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .space import (
    ENUMERATION_LIMIT,
    Move,
    Net,
    SpaceConfig,
    _adjacent,
    enumerate_space,
    neighbors,
)

__all__ = [
    "EdgeWeights",
    "DistanceCache",
    "default_cap",
    "geodesic_distance",
    "brute_force_distance",
    "all_pairs_distances",
]


@dataclass(frozen=True)
class EdgeWeights:
    """Edge costs: ``structural`` for tree edits, ``depth`` for FC-count edits."""

    structural: float = 1.0
    depth: float = 1.0

    def __post_init__(self):
        if not (self.structural > 0 and self.depth > 0):
            raise ValueError("edge weights must be strictly positive")
        if not (math.isfinite(self.structural) and math.isfinite(self.depth)):
            raise ValueError("edge weights must be finite")

    def cost(self, move: Move) -> float:
        return self.depth if move.kind.is_depth else self.structural


def default_cap(weights: EdgeWeights) -> float:
    return 20.0 * max(weights.structural, weights.depth)


# Path costs are sums of float weights, and the pairwise and single-source
# searches add them up in different orders.  Rounding every reported distance
# keeps cache hits bit-identical to a fresh search for any weights.
DISTANCE_DECIMALS = 9


def _snap(d: float) -> float:
    return round(d, DISTANCE_DECIMALS)


_WEIGHTED: dict[tuple[int, float, float], dict[int, tuple]] = {}


def _edge_table(max_fc: int, weights: EdgeWeights) -> dict[int, tuple]:
    return _WEIGHTED.setdefault((max_fc, weights.structural, weights.depth), {})


def _edges(uid: int, max_fc: int, weights: EdgeWeights, table: dict) -> tuple:
    edges = table.get(uid)
    if edges is None:
        wt, wd = weights.structural, weights.depth
        edges = table[uid] = tuple(
            (v, wd if mv.kind.is_depth else wt) for v, mv in _adjacent(uid, max_fc)
        )
    return edges


def _bidirectional(a: int, b: int, max_fc: int, weights: EdgeWeights, cap: float) -> float:
    if a == b:
        return 0.0
    table = _edge_table(max_fc, weights)
    dist = ({a: 0.0}, {b: 0.0})
    heaps: tuple[list, list] = ([(0.0, a)], [(0.0, b)])
    done: tuple[set, set] = (set(), set())
    best = math.inf
    while heaps[0] and heaps[1]:
        if heaps[0][0][0] + heaps[1][0][0] >= min(best, cap):
            break
        side = 0 if len(heaps[0]) <= len(heaps[1]) else 1
        d, u = heapq.heappop(heaps[side])
        if u in done[side]:
            continue
        done[side].add(u)
        mine, other = dist[side], dist[1 - side]
        for v, w in _edges(u, max_fc, weights, table):
            nd = d + w
            if nd < mine.get(v, math.inf):
                mine[v] = nd
                heapq.heappush(heaps[side], (nd, v))
                if v in other:
                    best = min(best, nd + other[v])
    return _snap(best) if best < cap else cap


def geodesic_distance(
    a: Net,
    b: Net,
    space: SpaceConfig,
    weights: EdgeWeights = EdgeWeights(),
    cap: float | None = None,
) -> float:
    """Weighted shortest-path cost between two nets, saturating at ``cap``.

    Runs a bidirectional uniform-cost search that always expands the side
    with the smaller frontier and stops once no undiscovered path can beat
    ``min(best, cap)``.  ``cap`` defaults to ``20 * max(weights)``.
    """
    cap = default_cap(weights) if cap is None else float(cap)
    if cap <= 0:
        raise ValueError("cap must be positive")
    return _bidirectional(a.uid, b.uid, space.max_fc, weights, cap)


class _SingleSource:
    """Resumable Dijkstra from one source, truncated at the cap.

    Once the search has settled everything closer than the cap it is
    frozen into a dense array indexed by net id; ids missing from that
    array are known to be at least ``cap`` away.
    """

    def __init__(self, source: int):
        self.settled: dict[int, float] = {}
        self.tentative: dict[int, float] = {source: 0.0}
        self.heap: list = [(0.0, source)]
        self.dense: np.ndarray | None = None

    def extend(self, wanted: set[int], max_fc: int, weights: EdgeWeights, cap: float):
        table = _edge_table(max_fc, weights)
        wanted = {k for k in wanted if k not in self.settled}
        heap, settled, tent = self.heap, self.settled, self.tentative
        while wanted and heap:
            d, u = heap[0]
            if d >= cap:
                break
            heapq.heappop(heap)
            if u in settled:
                continue
            settled[u] = _snap(d)
            wanted.discard(u)
            for v, w in _edges(u, max_fc, weights, table):
                nd = d + w
                if v not in settled and nd < tent.get(v, math.inf):
                    tent[v] = nd
                    heapq.heappush(heap, (nd, v))
        while heap and heap[0][1] in settled:
            heapq.heappop(heap)
        if not heap or heap[0][0] >= cap:
            size = max(settled) + 1
            row = np.full(size, cap)
            row[np.fromiter(settled.keys(), int, len(settled))] = np.fromiter(
                settled.values(), float, len(settled)
            )
            self.dense = row
            self.heap = self.tentative = None

    def lookup(self, uid: int, cap: float) -> float | None:
        if self.dense is not None:
            return float(self.dense[uid]) if uid < len(self.dense) else cap
        return self.settled.get(uid)

    def lookup_many(self, uids: np.ndarray, cap: float) -> np.ndarray:
        row = self.dense
        out = np.full(len(uids), cap)
        inside = uids < len(row)
        out[inside] = row[uids[inside]]
        return out


class DistanceCache:
    """Memoized geodesic distances for one ``(space, weights, cap)`` setting.

    Pairwise queries go through the bidirectional search and are stored
    under the unordered pair of nets.  :meth:`distances_from` keeps a
    resumable single-source search per source net, which is far cheaper
    when one net is compared against many.  Reads are lock-free and
    insertions are serialized; two threads computing the same pair at once
    is harmless since the result is deterministic.
    """

    def __init__(
        self,
        space: SpaceConfig,
        weights: EdgeWeights = EdgeWeights(),
        cap: float | None = None,
    ):
        self.space = space
        self.weights = weights
        self.cap = default_cap(weights) if cap is None else float(cap)
        if self.cap <= 0:
            raise ValueError("cap must be positive")
        self._pairs: dict[tuple[int, int], float] = {}
        self._sources: dict[int, _SingleSource] = {}
        self._lock = threading.Lock()

    @property
    def source_count(self) -> int:
        return len(self._sources)

    def _lookup(self, a: int, b: int) -> float | None:
        if a == b:
            return 0.0
        d = self._pairs.get((a, b) if a < b else (b, a))
        if d is not None:
            return d
        for s, t in ((a, b), (b, a)):
            row = self._sources.get(s)
            if row is not None:
                d = row.lookup(t, self.cap)
                if d is not None:
                    return d
        return None

    def distance(self, a: Net, b: Net) -> float:
        d = self._lookup(a.uid, b.uid)
        if d is None:
            d = _bidirectional(a.uid, b.uid, self.space.max_fc, self.weights, self.cap)
            with self._lock:
                self._pairs[(a.uid, b.uid) if a.uid < b.uid else (b.uid, a.uid)] = d
        return d

    def _row(self, source: int, wanted: Iterable[int]) -> _SingleSource:
        row = self._sources.get(source)
        if row is None or row.dense is None:
            with self._lock:
                row = self._sources.get(source)
                if row is None:
                    row = self._sources[source] = _SingleSource(source)
                if row.dense is None:
                    row.extend(set(wanted), self.space.max_fc, self.weights, self.cap)
        return row

    def distances_from(self, source: Net, targets: Sequence[Net]) -> np.ndarray:
        """Distances from ``source`` to every net in ``targets``."""
        uids = np.fromiter((t.uid for t in targets), int, len(targets))
        row = self._row(source.uid, uids.tolist())
        if row.dense is not None:
            out = row.lookup_many(uids, self.cap)
        else:
            out = np.array([row.settled.get(u, self.cap) for u in uids.tolist()])
        out[uids == source.uid] = 0.0
        return out

    def matrix(self, rows: Sequence[Net], cols: Sequence[Net]) -> np.ndarray:
        """Distance matrix with one single-source search per row net."""
        out = np.empty((len(rows), len(cols)))
        for i, r in enumerate(rows):
            out[i] = self.distances_from(r, cols)
        return out


NeighborFn = Callable[[Net, SpaceConfig], dict]


def _explicit_graph(
    nets: Sequence[Net],
    space: SpaceConfig,
    weights: EdgeWeights,
    neighbor_fn: NeighborFn,
) -> csr_matrix:
    index = {x: i for i, x in enumerate(nets)}
    rows, cols, vals = [], [], []
    for i, x in enumerate(nets):
        for y, mv in neighbor_fn(x, space).items():
            j = index.get(y)
            if j is None:
                raise ValueError(f"neighbor {y} of {x} lies outside the node set")
            rows.append(i)
            cols.append(j)
            vals.append(weights.cost(mv))
    n = len(nets)
    return csr_matrix((vals, (rows, cols)), shape=(n, n))


def all_pairs_distances(
    space: SpaceConfig,
    weights: EdgeWeights = EdgeWeights(),
    *,
    nets: Sequence[Net] | None = None,
    neighbor_fn: NeighborFn = neighbors,
    limit: int = ENUMERATION_LIMIT,
) -> tuple[list[Net], np.ndarray]:
    """Exact all-pairs distances on the fully materialized graph.

    Returns the node list (``enumerate_space`` order unless ``nets`` is
    given) and the dense distance matrix; unreachable pairs are ``inf``.
    """
    nets = list(enumerate_space(space, limit) if nets is None else nets)
    graph = _explicit_graph(nets, space, weights, neighbor_fn)
    return nets, dijkstra(graph, directed=True)


@lru_cache(maxsize=8)
def _whole_space_graph(space, weights, neighbor_fn, limit):
    # repeated oracle calls on one space share a single explicit graph
    nodes = enumerate_space(space, limit)
    index = {x: i for i, x in enumerate(nodes)}
    return nodes, index, _explicit_graph(nodes, space, weights, neighbor_fn)


def brute_force_distance(
    a: Net,
    b: Net,
    space: SpaceConfig,
    weights: EdgeWeights = EdgeWeights(),
    *,
    nets: Iterable[Net] | None = None,
    neighbor_fn: NeighborFn = neighbors,
    limit: int = ENUMERATION_LIMIT,
) -> float:
    """Shortest-path cost on the explicit graph; ``inf`` when unreachable.

    Test oracle only.  Raises ``SpaceTooLargeError`` beyond ``limit`` nets.
    """
    if nets is None:
        nodes, index, graph = _whole_space_graph(space, weights, neighbor_fn, limit)
    else:
        nodes = list(nets)
        index = {x: i for i, x in enumerate(nodes)}
        graph = _explicit_graph(nodes, space, weights, neighbor_fn)
    d = dijkstra(graph, directed=True, indices=index[a])
    return float(d[index[b]])
