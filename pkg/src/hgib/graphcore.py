"""Bipartite interaction graphs and the set algebra the behavior hierarchy is built from.

Graphs are immutable after construction (arrays are marked read-only) and keep a
canonical edge order, sorted by (user, item), so identical inputs always produce
bit-identical structures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# Weighted degrees below this threshold propagate nothing (coefficient 0).
DEGREE_EPS = 1e-12


@dataclass(frozen=True)
class BehaviorSchema:
    """Ordered behavior labels with one designated target behavior."""

    names: tuple[str, ...]
    target_index: int

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ValueError("behavior list must be nonempty")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate behavior names: {self.names}")
        if not 0 <= self.target_index < len(self.names):
            raise ValueError(
                f"target_index {self.target_index} out of range for {len(self.names)} behaviors"
            )

    @property
    def target(self) -> str:
        return self.names[self.target_index]

    @property
    def auxiliary(self) -> tuple[str, ...]:
        return tuple(n for i, n in enumerate(self.names) if i != self.target_index)


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """Deduplicated bipartite edge set for one behavior, indexed in both directions.

    edges is an (E, 2) int64 array sorted by (user, item); user_adj[u] and
    item_adj[v] are sorted neighbor arrays and are exact transposes of edges.
    """

    num_users: int
    num_items: int
    edges: np.ndarray
    user_adj: tuple[np.ndarray, ...]
    item_adj: tuple[np.ndarray, ...]

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.edges}

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionGraph):
            return NotImplemented
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and self.edges.shape == other.edges.shape
            and bool(np.array_equal(self.edges, other.edges))
        )


@dataclass(frozen=True)
class WeightedAdjacency:
    """Per-edge weights plus their symmetric normalization coefficients.

    norm_coeffs[i] = weights[i] / sqrt(deg_w(u_i) * deg_w(v_i)) with weighted
    degrees, and 0 whenever either weighted degree falls below DEGREE_EPS.
    """

    num_users: int
    num_items: int
    edges: np.ndarray
    weights: np.ndarray
    norm_coeffs: np.ndarray


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _adjacency_lists(edges: np.ndarray, num_users: int, num_items: int):
    # edges is canonically sorted by (u, v), so per-user item lists come out sorted.
    user_adj = []
    counts_u = np.bincount(edges[:, 0], minlength=num_users) if edges.size else np.zeros(num_users, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts_u)])
    for u in range(num_users):
        user_adj.append(_freeze(edges[offsets[u] : offsets[u + 1], 1].copy()))

    by_item = edges[np.lexsort((edges[:, 0], edges[:, 1]))] if edges.size else edges
    item_adj = []
    counts_v = np.bincount(edges[:, 1], minlength=num_items) if edges.size else np.zeros(num_items, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts_v)])
    for v in range(num_items):
        item_adj.append(_freeze(by_item[offsets[v] : offsets[v + 1], 0].copy()))
    return tuple(user_adj), tuple(item_adj)


def _from_canonical_edges(edges: np.ndarray, num_users: int, num_items: int) -> InteractionGraph:
    edges = np.ascontiguousarray(edges, dtype=np.int64).reshape(-1, 2)
    user_adj, item_adj = _adjacency_lists(edges, num_users, num_items)
    return InteractionGraph(
        num_users=num_users,
        num_items=num_items,
        edges=_freeze(edges),
        user_adj=user_adj,
        item_adj=item_adj,
    )


def build_graph(
    num_users: int, num_items: int, raw_pairs: Iterable[tuple[int, int]]
) -> InteractionGraph:
    """Build a deduplicated, canonically ordered interaction graph.

    Raises ValueError naming the first offending pair if any index is out of range.
    """
    if num_users < 0 or num_items < 0:
        raise ValueError("num_users/num_items must be nonnegative")
    pairs = np.asarray(list(raw_pairs), dtype=np.int64).reshape(-1, 2)
    if pairs.size:
        bad = (
            (pairs[:, 0] < 0)
            | (pairs[:, 0] >= num_users)
            | (pairs[:, 1] < 0)
            | (pairs[:, 1] >= num_items)
        )
        if bad.any():
            u, v = pairs[int(np.argmax(bad))]
            raise ValueError(
                f"interaction ({u}, {v}) out of range for {num_users} users x {num_items} items"
            )
        pairs = np.unique(pairs, axis=0)  # dedups and sorts by (u, v)
    return _from_canonical_edges(pairs, num_users, num_items)


def _check_same_dims(graphs: Sequence[InteractionGraph]) -> tuple[int, int]:
    first = graphs[0]
    for g in graphs[1:]:
        if g.num_users != first.num_users or g.num_items != first.num_items:
            raise ValueError(
                f"graph dimension mismatch: ({first.num_users},{first.num_items}) vs "
                f"({g.num_users},{g.num_items})"
            )
    return first.num_users, first.num_items


def _edge_codes(g: InteractionGraph) -> np.ndarray:
    # Encodes (u, v) as u * num_items + v; code order equals canonical edge order.
    return g.edges[:, 0] * np.int64(g.num_items) + g.edges[:, 1]


def _decode(codes: np.ndarray, num_users: int, num_items: int) -> InteractionGraph:
    edges = np.stack([codes // num_items, codes % num_items], axis=1) if codes.size else np.zeros((0, 2), dtype=np.int64)
    return _from_canonical_edges(edges, num_users, num_items)


def union_graphs(graphs: Sequence[InteractionGraph]) -> InteractionGraph:
    """Exact set union of the edge sets; all graphs must share dimensions."""
    if not graphs:
        raise ValueError("union of zero graphs is undefined")
    num_users, num_items = _check_same_dims(graphs)
    codes = np.concatenate([_edge_codes(g) for g in graphs])
    return _decode(np.unique(codes), num_users, num_items)


def intersect_graphs(g1: InteractionGraph, g2: InteractionGraph) -> InteractionGraph:
    """Exact set intersection of two edge sets."""
    num_users, num_items = _check_same_dims([g1, g2])
    codes = np.intersect1d(_edge_codes(g1), _edge_codes(g2), assume_unique=True)
    return _decode(codes, num_users, num_items)


def difference_graphs(g1: InteractionGraph, g2: InteractionGraph) -> InteractionGraph:
    """Edges of g1 that are not in g2."""
    num_users, num_items = _check_same_dims([g1, g2])
    codes = np.setdiff1d(_edge_codes(g1), _edge_codes(g2), assume_unique=True)
    return _decode(codes, num_users, num_items)


def norm_coefficients(
    edges: np.ndarray, weights: np.ndarray, num_users: int, num_items: int
):
    """Symmetric normalization coefficients for weighted bipartite edges.

    Returns (coeffs, user_degrees, item_degrees, active_mask) where degrees are
    weighted degrees and active_mask marks edges whose both endpoints have
    degree above DEGREE_EPS. Single implementation shared with the
    differentiable propagation kernel so the operator is defined exactly once.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != edges.shape[0]:
        raise ValueError(f"expected {edges.shape[0]} edge weights, got {w.shape[0]}")
    if w.size and w.min() < 0:
        raise ValueError("edge weights must be nonnegative")
    eu = edges[:, 0]
    ev = edges[:, 1]
    deg_u = np.bincount(eu, weights=w, minlength=num_users)
    deg_v = np.bincount(ev, weights=w, minlength=num_items)
    ok = (deg_u[eu] > DEGREE_EPS) & (deg_v[ev] > DEGREE_EPS)
    coeffs = np.zeros_like(w)
    coeffs[ok] = w[ok] / np.sqrt(deg_u[eu][ok] * deg_v[ev][ok])
    return coeffs, deg_u, deg_v, ok


def normalized_adjacency(graph: InteractionGraph, edge_weights: np.ndarray) -> WeightedAdjacency:
    """Attach weights and symmetric normalization coefficients to a graph's edges."""
    coeffs, _, _, _ = norm_coefficients(graph.edges, edge_weights, graph.num_users, graph.num_items)
    return WeightedAdjacency(
        num_users=graph.num_users,
        num_items=graph.num_items,
        edges=graph.edges,
        weights=_freeze(np.asarray(edge_weights, dtype=np.float64).reshape(-1).copy()),
        norm_coeffs=_freeze(coeffs),
    )
