"""Balanced multilevel graph partitioning and the nested multiscale hierarchy.

The partitioner follows the classic multilevel recipe: heavy-edge matching to
coarsen, greedy graph growing for an initial bisection, Fiduccia-Mattheyses
refinement while uncoarsening, recursive bisection for k parts, and a final
k-way boundary refinement under the hard balance bound.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .spatial_graph import SpatialGraph, spd_table

DEFAULT_IMBALANCE = 0.03
_COARSEST = 40
_INIT_TRIES = 4


class PartitionError(ValueError):
    pass


@dataclass
class WeightedGraph:
    """Undirected graph with integer vertex and edge weights (``adj[u][v]`` = weight)."""

    n: int
    adj: list[dict[int, int]] = field(repr=False)
    vwgt: list[int] = field(repr=False)

    @classmethod
    def from_spatial(cls, graph: SpatialGraph) -> "WeightedGraph":
        return cls(graph.n, [{v: 1 for v in nb} for nb in graph.neighbors], [1] * graph.n)

    @property
    def total_weight(self) -> int:
        return sum(self.vwgt)

    def induced(self, nodes: Sequence[int]) -> "WeightedGraph":
        local = {u: i for i, u in enumerate(nodes)}
        adj = [{local[v]: w for v, w in self.adj[u].items() if v in local} for u in nodes]
        return WeightedGraph(len(nodes), adj, [self.vwgt[u] for u in nodes])


GraphLike = Union[SpatialGraph, WeightedGraph]


def as_weighted(graph: GraphLike) -> WeightedGraph:
    if isinstance(graph, WeightedGraph):
        return graph
    return WeightedGraph.from_spatial(graph)


@dataclass
class Partition:
    p: int
    assignment: np.ndarray

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)

    @property
    def parts(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.p)]
        for node, part in enumerate(self.assignment.tolist()):
            out[part].append(node)
        return out

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.p)

    def edge_cut(self, graph: GraphLike) -> int:
        g = as_weighted(graph)
        a = self.assignment
        return sum(w for u in range(g.n) for v, w in g.adj[u].items() if u < v and a[u] != a[v])

    def to_json(self) -> dict:
        return {"p": int(self.p), "assignment": [int(x) for x in self.assignment]}


def max_part_size(n: int, p: int, imbalance: float) -> int:
    """Hard balance bound ``floor(ceil(n / p) * (1 + imbalance))``."""
    return int(math.floor(math.ceil(n / p) * (1.0 + imbalance) + 1e-9))


def check_partition(part: Partition, n: int, imbalance: float) -> None:
    """Raise ``PartitionError`` unless ``part`` is a disjoint, non-empty, balanced cover of ``n`` nodes."""
    a = part.assignment
    if a.shape != (n,):
        raise PartitionError(f"assignment has shape {a.shape}, expected ({n},)")
    if a.min(initial=0) < 0 or a.max(initial=0) >= part.p:
        raise PartitionError("assignment references a part outside [0, p)")
    sizes = part.sizes
    if (sizes == 0).any():
        raise PartitionError(f"empty parts: {np.flatnonzero(sizes == 0).tolist()}")
    limit = max_part_size(n, part.p, imbalance)
    if sizes.max() > limit:
        raise PartitionError(f"part of size {sizes.max()} exceeds bound {limit}")


# --------------------------------------------------------------------------
# coarsening


def coarsen(graph: GraphLike, seed: int | None = None, max_vwgt: int | None = None):
    """Contract a heavy-edge maximal matching.

    Returns ``(coarse_graph, mapping)`` where ``mapping[u]`` is the coarse node
    holding fine node ``u``. Nodes are visited in index order unless ``seed`` is
    given, in which case the order is a seeded permutation.
    """
    g = as_weighted(graph)
    order = range(g.n) if seed is None else np.random.default_rng(seed).permutation(g.n).tolist()
    return _coarsen(g, order, max_vwgt)


def _coarsen(g: WeightedGraph, order, max_vwgt):
    match = [-1] * g.n
    for u in order:
        if match[u] != -1:
            continue
        best, best_w = -1, 0
        for v, w in g.adj[u].items():
            if match[v] != -1 or v == u:
                continue
            if max_vwgt is not None and g.vwgt[u] + g.vwgt[v] > max_vwgt:
                continue
            if w > best_w or (w == best_w and v < best):
                best, best_w = v, w
        if best == -1:
            match[u] = u
        else:
            match[u], match[best] = best, u
    mapping = np.full(g.n, -1, dtype=np.int64)
    cn = 0
    for u in range(g.n):
        if mapping[u] == -1:
            mapping[u] = cn
            mapping[match[u]] = cn
            cn += 1
    vwgt = [0] * cn
    adj: list[dict[int, int]] = [dict() for _ in range(cn)]
    m = mapping.tolist()
    for u in range(g.n):
        cu = m[u]
        vwgt[cu] += g.vwgt[u]
        row = adj[cu]
        for v, w in g.adj[u].items():
            cv = m[v]
            if cv != cu:
                row[cv] = row.get(cv, 0) + w
    return WeightedGraph(cn, adj, vwgt), mapping


# --------------------------------------------------------------------------
# two-way partitioning


def _cut_and_gains(g: WeightedGraph, side: list[int]):
    gain = [0] * g.n
    cut2 = 0
    for u in range(g.n):
        su = side[u]
        acc = 0
        for v, w in g.adj[u].items():
            if side[v] == su:
                acc -= w
            else:
                acc += w
                cut2 += w
        gain[u] = acc
    return cut2 // 2, gain


def _excess(w, max_w) -> int:
    return max(0, w[0] - max_w[0]) + max(0, w[1] - max_w[1])


def _fm(g: WeightedGraph, side: list[int], max_w: tuple[int, int], passes: int = 10) -> list[int]:
    """Fiduccia-Mattheyses refinement of a bisection under side weight bounds.

    States are ranked by (bound excess, cut); each pass rolls back to its best state.
    """
    side = list(side)
    slack = max(g.vwgt) if g.n else 0
    patience = max(30, g.n // 20)
    for _ in range(passes):
        cut, gain = _cut_and_gains(g, side)
        w = [0, 0]
        for u in range(g.n):
            w[side[u]] += g.vwgt[u]
        best_key = (_excess(w, max_w), cut)
        best_len = 0
        moves: list[int] = []
        locked = [False] * g.n
        heaps: list[list] = [[], []]
        for u in range(g.n):
            heaps[side[u]].append((-gain[u], u))
        heapq.heapify(heaps[0])
        heapq.heapify(heaps[1])
        stale = 0
        while stale < patience:
            cands = []
            over = [w[0] > max_w[0], w[1] > max_w[1]]
            for s in (0, 1):
                h = heaps[s]
                while h and (locked[h[0][1]] or side[h[0][1]] != s or -h[0][0] != gain[h[0][1]]):
                    heapq.heappop(h)
                if not h:
                    continue
                u = h[0][1]
                if over[1 - s] or (w[1 - s] + g.vwgt[u] > max_w[1 - s] + slack):
                    continue
                if over[s] is False and any(over):
                    continue
                cands.append((-gain[u], -w[s], s, u))
            if not cands:
                break
            _, _, s, u = min(cands)
            heapq.heappop(heaps[s])
            locked[u] = True
            side[u] = 1 - s
            w[s] -= g.vwgt[u]
            w[1 - s] += g.vwgt[u]
            cut -= gain[u]
            gain[u] = -gain[u]
            for v, wt in g.adj[u].items():
                if side[v] == side[u]:
                    gain[v] -= 2 * wt
                else:
                    gain[v] += 2 * wt
                if not locked[v]:
                    heapq.heappush(heaps[side[v]], (-gain[v], v))
            moves.append(u)
            key = (_excess(w, max_w), cut)
            if key < best_key:
                best_key, best_len, stale = key, len(moves), 0
            else:
                stale += 1
        for u in moves[best_len:]:
            side[u] = 1 - side[u]
        if best_len == 0:
            break
    return side


def _grow_bisection(g: WeightedGraph, target0: float, start: int, rng) -> list[int]:
    """Greedy graph growing: absorb max-gain frontier nodes into side 0 until ``target0`` is met."""
    side = [1] * g.n
    w0 = 0
    conn = [0] * g.n  # edge weight from node into region 0
    heap: list = []
    pending = start
    while w0 < target0:
        if pending is None:
            while heap and (side[heap[0][1]] == 0 or -heap[0][0] != 2 * conn[heap[0][1]] - _degw(g, heap[0][1])):
                heapq.heappop(heap)
            if heap:
                pending = heapq.heappop(heap)[1]
            else:
                rest = [u for u in range(g.n) if side[u] == 1]
                if not rest:
                    break
                pending = rest[int(rng.integers(len(rest)))]
        u, pending = pending, None
        if w0 + g.vwgt[u] > target0 and w0 > 0 and (w0 + g.vwgt[u] - target0) > (target0 - w0):
            break
        side[u] = 0
        w0 += g.vwgt[u]
        for v, wt in g.adj[u].items():
            if side[v] == 1:
                conn[v] += wt
                heapq.heappush(heap, (-(2 * conn[v] - _degw(g, v)), v))
    return side


def _degw(g: WeightedGraph, u: int) -> int:
    return sum(g.adj[u].values())


def _bisect(g: WeightedGraph, frac0: float, ub: float, rng) -> list[int]:
    total = g.total_weight
    target0 = total * frac0
    target1 = total - target0
    max_w = (max(math.ceil(target0 - 1e-9), int(target0 * (1 + ub))),
             max(math.ceil(target1 - 1e-9), int(target1 * (1 + ub))))

    hierarchy = []
    cur = g
    max_vwgt = max(1, int(1.5 * total / _COARSEST))
    while cur.n > _COARSEST:
        order = rng.permutation(cur.n).tolist()
        coarse, cmap = _coarsen(cur, order, max_vwgt)
        if coarse.n > 0.9 * cur.n:
            break
        hierarchy.append((cur, cmap))
        cur = coarse

    best_side, best_key = None, None
    tries = _INIT_TRIES if cur.n > 1 else 1
    starts = rng.choice(cur.n, size=min(tries, cur.n), replace=False).tolist()
    for start in starts:
        side = _fm(cur, _grow_bisection(cur, target0, start, rng), max_w)
        w0 = sum(cur.vwgt[u] for u in range(cur.n) if side[u] == 0)
        cut, _ = _cut_and_gains(cur, side)
        key = (_excess((w0, total - w0), max_w), cut)
        if best_key is None or key < best_key:
            best_side, best_key = side, key

    side = best_side
    for fine, cmap in reversed(hierarchy):
        side = [side[c] for c in cmap.tolist()]
        side = _fm(fine, side, max_w)
    return side


def _recursive_bisection(g: WeightedGraph, nodes: list[int], k: int, first: int,
                         out: np.ndarray, ub: float, rng) -> None:
    if k == 1 or g.n == 0:
        out[nodes] = first
        return
    k0 = k // 2
    side = _bisect(g, k0 / k, ub, rng)
    idx0 = [i for i in range(g.n) if side[i] == 0]
    idx1 = [i for i in range(g.n) if side[i] == 1]
    _recursive_bisection(g.induced(idx0), [nodes[i] for i in idx0], k0, first, out, ub, rng)
    _recursive_bisection(g.induced(idx1), [nodes[i] for i in idx1], k - k0, first + k0, out, ub, rng)


# --------------------------------------------------------------------------
# k-way refinement and repair


def _connectivity(g: WeightedGraph, a: np.ndarray, u: int) -> dict[int, int]:
    conn: dict[int, int] = {}
    for v, w in g.adj[u].items():
        q = int(a[v])
        conn[q] = conn.get(q, 0) + w
    return conn


def refine(graph: GraphLike, partition: Partition, imbalance: float = DEFAULT_IMBALANCE,
           max_passes: int = 20) -> Partition:
    """Greedy k-way boundary refinement.

    Only strictly cut-reducing moves are taken, never into a part at the balance
    bound and never emptying a part, so the cut is non-increasing.
    """
    g = as_weighted(graph)
    p = partition.p
    a = partition.assignment.copy()
    if p == 1:
        return Partition(p, a)
    limit = max_part_size(g.n, p, imbalance)
    sizes = np.bincount(a, minlength=p)
    for _ in range(max_passes):
        moved = 0
        for u in range(g.n):
            pu = int(a[u])
            conn = _connectivity(g, a, u)
            if not conn or (len(conn) == 1 and pu in conn) or sizes[pu] <= 1:
                continue
            own = conn.get(pu, 0)
            best_q, best_gain = -1, 0
            for q in sorted(conn):
                if q == pu or sizes[q] + 1 > limit:
                    continue
                gain = conn[q] - own
                if gain > best_gain:
                    best_q, best_gain = q, gain
            if best_q >= 0:
                a[u] = best_q
                sizes[pu] -= 1
                sizes[best_q] += 1
                moved += 1
        if moved == 0:
            break
    return Partition(p, a)


def _repair(g: WeightedGraph, a: np.ndarray, p: int, limit: int) -> np.ndarray:
    """Move least-attached nodes until every part is non-empty and within ``limit``."""
    sizes = np.bincount(a, minlength=p)

    def cheapest(src: int, allowed) -> tuple[int, int]:
        best = None
        for u in np.flatnonzero(a == src).tolist():
            conn = _connectivity(g, a, u)
            own = conn.get(src, 0)
            for q in allowed:
                key = (own - conn.get(q, 0), u, q)
                if best is None or key < best:
                    best = key
        return best[1], best[2]

    while True:
        over = np.flatnonzero(sizes > limit)
        empty = np.flatnonzero(sizes == 0)
        if len(empty):
            src = int(np.argmax(sizes))
            u, q = cheapest(src, [int(empty[0])])
        elif len(over):
            src = int(over[0])
            u, q = cheapest(src, np.flatnonzero(sizes < limit).tolist())
        else:
            return a
        a[u] = q
        sizes[src] -= 1
        sizes[q] += 1


def partition_graph(graph: GraphLike, p: int, imbalance: float = DEFAULT_IMBALANCE,
                    seed: int = 0) -> Partition:
    """Split ``graph`` into ``p`` balanced parts with a small edge cut.

    Nodes carry unit weight regardless of any vertex weights on ``graph``; edge
    weights are honoured.
    """
    g = as_weighted(graph)
    n = g.n
    if p < 1 or p > n:
        raise PartitionError(f"cannot split {n} nodes into {p} parts")
    if imbalance < 0:
        raise PartitionError("imbalance must be non-negative")
    g = WeightedGraph(n, g.adj, [1] * n)
    if p == 1:
        return Partition(1, np.zeros(n, dtype=np.int64))
    if p == n:
        return Partition(n, np.arange(n))
    rng = np.random.default_rng(seed)
    a = np.zeros(n, dtype=np.int64)
    ub = imbalance / max(1, math.ceil(math.log2(p)))
    _recursive_bisection(g, list(range(n)), p, 0, a, ub, rng)
    limit = max_part_size(n, p, imbalance)
    a = _repair(g, a, p, limit)
    return refine(g, Partition(p, a), imbalance)


def random_partition(n: int, p: int, seed: int = 0) -> Partition:
    """Random balanced partition (sizes differ by at most one)."""
    if p < 1 or p > n:
        raise PartitionError(f"cannot split {n} nodes into {p} parts")
    perm = np.random.default_rng(seed).permutation(n)
    a = np.empty(n, dtype=np.int64)
    a[perm] = np.arange(n) % p
    return Partition(p, a)


# --------------------------------------------------------------------------
# layouts and hierarchy


@dataclass
class Layout:
    """Mapping of N node rows into a zero-padded P x M block array."""

    p: int
    m: int
    perm: np.ndarray
    pad_mask: np.ndarray

    @classmethod
    def from_partition(cls, part: Partition) -> "Layout":
        parts = part.parts
        m = max(len(x) for x in parts)
        mask = np.zeros((part.p, m), dtype=bool)
        for i, nodes in enumerate(parts):
            mask[i, : len(nodes)] = True
        perm = np.array([u for nodes in parts for u in nodes], dtype=np.int64)
        return cls(part.p, m, perm, mask)

    @property
    def n(self) -> int:
        return len(self.perm)


def apply_layout(values: np.ndarray, layout: Layout) -> np.ndarray:
    """``(..., N, D) -> (..., P, M, D)``; padded slots are zero."""
    values = np.asarray(values)
    if values.ndim < 2 or values.shape[-2] != layout.n:
        raise ValueError(f"expected (..., {layout.n}, D), got {values.shape}")
    lead = values.shape[:-2]
    out = np.zeros(lead + (layout.p, layout.m, values.shape[-1]), dtype=values.dtype)
    out[..., layout.pad_mask, :] = values[..., layout.perm, :]
    return out


def invert_layout(blocks: np.ndarray, layout: Layout) -> np.ndarray:
    """``(..., P, M, D) -> (..., N, D)`` reading only the real slots."""
    blocks = np.asarray(blocks)
    if blocks.ndim < 3 or blocks.shape[-3:-1] != (layout.p, layout.m):
        raise ValueError(f"expected (..., {layout.p}, {layout.m}, D), got {blocks.shape}")
    out = np.empty(blocks.shape[:-3] + (layout.n, blocks.shape[-1]), dtype=blocks.dtype)
    out[..., layout.perm, :] = blocks[..., layout.pad_mask, :]
    return out


def quotient_graph(graph: GraphLike, part: Partition) -> WeightedGraph:
    """Parts as super-nodes; edge weight = number (weight) of crossing edges."""
    g = as_weighted(graph)
    a = part.assignment.tolist()
    adj: list[dict[int, int]] = [dict() for _ in range(part.p)]
    for u in range(g.n):
        pu = a[u]
        for v, w in g.adj[u].items():
            pv = a[v]
            if pv != pu:
                adj[pu][pv] = adj[pu].get(pv, 0) + w
    return WeightedGraph(part.p, adj, part.sizes.tolist())


def coarse_spd(part: Partition, graph: GraphLike) -> np.ndarray:
    """Hop distance between parts on the quotient graph (-1 if unreachable)."""
    q = quotient_graph(graph, part)
    return spd_table(SpatialGraph(q.n, [sorted(r) for r in q.adj]), range(q.n))


@dataclass
class HierarchyLevel:
    partition: Partition
    layout: Layout
    intra_spd: list[np.ndarray]
    coarse_spd: np.ndarray

    def padded_intra_spd(self) -> np.ndarray:
        """P x M x M table; entries touching padded slots are -1 (they are masked anyway)."""
        out = np.full((self.layout.p, self.layout.m, self.layout.m), -1, dtype=np.int64)
        for i, t in enumerate(self.intra_spd):
            k = t.shape[0]
            out[i, :k, :k] = t
        return out


@dataclass
class PartitionHierarchy:
    levels: list[HierarchyLevel]

    def __len__(self) -> int:
        return len(self.levels)

    def to_json(self) -> list[dict]:
        return [lvl.partition.to_json() for lvl in self.levels]


def _make_level(graph: SpatialGraph, part: Partition) -> HierarchyLevel:
    layout = Layout.from_partition(part)
    intra = [spd_table(graph, nodes) for nodes in part.parts]
    return HierarchyLevel(part, layout, intra, coarse_spd(part, graph))


def hierarchy_from_assignments(graph: SpatialGraph, assignments) -> PartitionHierarchy:
    """Rebuild a stored hierarchy (one assignment vector per level, finest first)."""
    levels = []
    for a in assignments:
        a = np.asarray(a, dtype=np.int64)
        if a.shape != (graph.n,):
            raise PartitionError(f"assignment covers {a.shape[0]} nodes, graph has {graph.n}")
        p = int(a.max()) + 1 if a.size else 0
        part = Partition(p, a)
        check_partition(part, graph.n, float(graph.n))  # balance not re-checked
        levels.append(_make_level(graph, part))
    h = PartitionHierarchy(levels)
    for fine, coarse in zip(h.levels, h.levels[1:]):
        for part in coarse.partition.parts:
            owners = set(fine.partition.assignment[part].tolist())
            if sum(fine.partition.sizes[list(owners)]) != len(part):
                raise PartitionError("stored levels are not nested")
    return h


def build_hierarchy(graph: SpatialGraph, p0: int, levels: int, imbalance: float = DEFAULT_IMBALANCE,
                    seed: int = 0, method: str = "metis") -> PartitionHierarchy:
    """Nested partitions with part counts ``p0, p0/2, ...``.

    Level l+1 pairs up the parts of level l by partitioning the quotient graph
    into halves of exactly two super-nodes each. ``method="random"`` replaces
    both steps by random balanced assignments (for ablations).
    """
    if levels < 1:
        raise PartitionError("levels must be >= 1")
    if p0 % (2 ** (levels - 1)) != 0:
        raise PartitionError(f"p0={p0} is not divisible by 2^(levels-1)={2 ** (levels - 1)}")
    if p0 > graph.n:
        raise PartitionError(f"p0={p0} exceeds node count {graph.n}")
    if method == "metis":
        part = partition_graph(graph, p0, imbalance, seed)
    elif method == "random":
        part = random_partition(graph.n, p0, seed)
    else:
        raise ValueError(f"unknown partition method {method!r}")
    out = [_make_level(graph, part)]
    for lvl in range(1, levels):
        half = part.p // 2
        if method == "metis":
            pairing = partition_graph(quotient_graph(graph, part), half, 0.0, seed + lvl).assignment
        else:
            pairing = random_partition(part.p, half, seed + lvl).assignment
        part = Partition(half, pairing[part.assignment])
        out.append(_make_level(graph, part))
    return PartitionHierarchy(out)
