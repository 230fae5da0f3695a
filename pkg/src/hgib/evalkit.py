"""Full-ranking top-K evaluation and the information-abundance diagnostic.

Ranking scores the entire item set per user (training positives excluded by
default), with ties broken by ascending item index for cross-platform
determinism. Information abundance summarizes how far an embedding matrix is
from rank collapse: the sum of its singular values over the largest one.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .graphcore import InteractionGraph
from .model import ForwardOutputs

THREADS_ENV = "HGIB_THREADS"


@dataclass(frozen=True)
class RankingResult:
    hr_at_k: float
    ndcg_at_k: float
    k: int
    num_evaluated_users: int

    def __post_init__(self):
        if not 0.0 <= self.ndcg_at_k <= self.hr_at_k <= 1.0:
            raise ValueError("metrics must satisfy 0 <= NDCG@K <= HR@K <= 1")


def _env_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    return max(1, value)


def _rank_of(scores: np.ndarray, test_item: int, excluded: np.ndarray | None) -> int:
    """1-based rank of the test item among candidate items (ties resolved by
    ascending item index; excluded items removed from candidacy)."""
    target_score = scores[test_item]
    better = scores > target_score
    ties_below = scores == target_score
    ties_below &= np.arange(scores.size) < test_item
    if excluded is not None and excluded.size:
        better[excluded] = False
        ties_below[excluded] = False
    return int(better.sum() + ties_below.sum()) + 1


def rank_metrics(
    outputs: ForwardOutputs | np.ndarray,
    test_pairs: np.ndarray,
    train_graph: InteractionGraph | None,
    k: int,
    exclude_train: bool = True,
    num_threads: int | None = None,
) -> RankingResult:
    """HR@K and NDCG@K under full ranking, one relevant item per user.

    `outputs` is either the forward pass (items scored by inner product with
    the user row of the final representation) or a precomputed dense
    (num_users, num_items) score matrix. Each test user's training positives
    are excluded from candidacy unless exclude_train is False.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    pairs = np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size == 0:
        raise ValueError("empty test set")
    if num_threads is None:
        num_threads = _env_threads()

    if isinstance(outputs, np.ndarray):
        score_matrix = outputs
        num_users, num_items = score_matrix.shape

        def user_scores(u: int) -> np.ndarray:
            return score_matrix[u]

    else:
        final = outputs.final.value
        num_users, num_items = outputs.num_users, outputs.num_items
        item_block = final[num_users:]

        def user_scores(u: int) -> np.ndarray:
            return item_block @ final[u]

    if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= num_users:
        raise ValueError("test user index out of range")
    if pairs[:, 1].min() < 0 or pairs[:, 1].max() >= num_items:
        raise ValueError("test item index out of range")

    ranks = np.empty(pairs.shape[0], dtype=np.int64)

    def fill(indices) -> None:
        for i in indices:
            u, item = int(pairs[i, 0]), int(pairs[i, 1])
            excluded = None
            if exclude_train and train_graph is not None:
                excluded = train_graph.user_adj[u]
                if item in excluded:
                    raise ValueError(f"test item {item} of user {u} is a training positive")
            ranks[i] = _rank_of(user_scores(u), item, excluded)

    if num_threads <= 1 or pairs.shape[0] < 2 * num_threads:
        fill(range(pairs.shape[0]))
    else:
        chunks = np.array_split(np.arange(pairs.shape[0]), num_threads)
        with ThreadPoolExecutor(max_workers=num_threads) as pool:
            list(pool.map(fill, chunks))

    # Aggregation runs over the fixed test-pair order regardless of threading.
    hits = ranks <= k
    hr = float(hits.mean())
    gains = np.where(hits, 1.0 / np.log2(ranks + 1.0), 0.0)
    ndcg = float(gains.mean())
    return RankingResult(hr_at_k=hr, ndcg_at_k=ndcg, k=k, num_evaluated_users=int(pairs.shape[0]))


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60):
    """Cyclic Jacobi diagonalization of a symmetric matrix.

    Sweeps stop when the off-diagonal Frobenius mass drops below tol times the
    matrix Frobenius norm. Returns (eigenvalues descending, eigenvectors as
    columns in the same order).
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-10 * max(1.0, float(np.abs(a).max(initial=0.0)))):
        raise ValueError("matrix must be symmetric")
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    norm = float(np.linalg.norm(a))
    if norm == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = math.sqrt(max(0.0, float((a * a).sum()) - float((a.diagonal() ** 2).sum())))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                a[p, q] = a[q, p] = 0.0
                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    eigenvalues = a.diagonal().copy()
    order = np.argsort(eigenvalues)[::-1]
    return eigenvalues[order], v[:, order]


def singular_values(e: np.ndarray) -> np.ndarray:
    """Singular values (descending) via eigenvalues of the small Gram matrix."""
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    gram = e.T @ e
    eigenvalues, _ = jacobi_eigh(gram)
    return np.sqrt(np.maximum(eigenvalues, 0.0))


def information_abundance(e: np.ndarray) -> float:
    """Sum of singular values normalized by the largest one.

    Equal singular values give the column count; a rank-1 matrix gives 1. The
    zero matrix is rejected (undefined)."""
    sigma = singular_values(e)
    top = float(sigma.max(initial=0.0))
    if top <= 0.0:
        raise ValueError("information abundance is undefined for the zero matrix")
    return float(sigma.sum() / top)


def diagnose_hierarchy(outputs: ForwardOutputs) -> list[tuple[str, float]]:
    """Information abundance of every encoder stage, in hierarchy order."""
    from .model import component_label  # local import avoids a cycle at module load

    schema = outputs.schema
    stages: list[tuple[str, np.ndarray]] = [("E0", outputs.base.value), ("uni", outputs.unified.value)]
    for name in schema.names:
        stages.append((name, outputs.behavior[name].value))
    for name in schema.auxiliary:
        for kind in ("inter", "diff"):
            stages.append(
                (component_label(name, kind, schema.target), outputs.components[name][kind].value)
            )
    stages.append(("O", outputs.final.value))
    return [(label, information_abundance(matrix)) for label, matrix in stages]
