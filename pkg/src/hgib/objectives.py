"""Training losses: sampled-softmax recommendation loss, symmetric InfoNCE
preservation terms, kernel-based dependence (HSIC) compression terms, and L2
regularization, composed into one scalar objective.

All losses are built on a Tape so gradients reach the embedding table; the
independence measure and the contrastive loss operate on the rows of the
current mini-batch only, which keeps their cost quadratic in batch size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffengine import NORM_EPS, Tape, Tensor
from .model import ForwardOutputs

logger = logging.getLogger(__name__)

KERNEL_KINDS = ("rbf", "linear")


@dataclass(frozen=True)
class KernelConfig:
    """Kernel for the dependence measure.

    bandwidth is the RBF squared bandwidth (sigma^2); None selects the median
    of pairwise squared distances per batch, falling back to 1.0 when the
    median is below 1e-12. The bandwidth is treated as a constant in
    differentiation.
    """

    kind: str = "rbf"
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"kernel kind must be one of {KERNEL_KINDS}, got {self.kind!r}")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")


@dataclass(frozen=True)
class BatchIndexSet:
    """Index lists for one training batch: per instance one user, one positive
    item, and n_neg negative items (item-space indices)."""

    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __post_init__(self):
        if self.users.ndim != 1 or self.users.size == 0:
            raise ValueError("batch must contain at least one user instance")
        if self.pos_items.shape != self.users.shape:
            raise ValueError("one positive item per user instance required")
        if self.neg_items.ndim != 2 or self.neg_items.shape[0] != self.users.size:
            raise ValueError("neg_items must be (batch, n_neg)")

    @property
    def size(self) -> int:
        return int(self.users.size)

    @property
    def n_neg(self) -> int:
        return int(self.neg_items.shape[1])


@dataclass(frozen=True)
class LossBreakdown:
    rec: float
    pres: float
    comp: float
    reg: float
    total: float
    alpha: float
    beta: float
    reg_coeff: float

    def composition_residual(self) -> float:
        return abs(
            self.total
            - (self.rec + self.alpha * self.pres + self.beta * self.comp + self.reg_coeff * self.reg)
        )


def _row_dot(tape: Tape, a: Tensor, b: Tensor, factor: float = 1.0) -> Tensor:
    """Per-row inner products as an (n, 1) column, optionally scaled."""
    d = a.value.shape[1]
    prod = tape.apply("mul_elementwise", a, b)
    return tape.apply("scale", tape.apply("mean_rows", prod), d * factor)


def _logsumexp_rows(tape: Tape, x: Tensor) -> Tensor:
    """Row-wise log-sum-exp as an (n, 1) column; the row max is a constant shift."""
    shift = tape.constant(x.value.max(axis=1, keepdims=True))
    e = tape.apply("exp", tape.apply("sub", x, shift))
    row_sum = tape.apply("scale", tape.apply("mean_rows", e), float(x.value.shape[1]))
    return tape.apply("add", tape.apply("log", row_sum), shift)


def _normalize_rows(tape: Tape, x: Tensor) -> Tensor:
    norms = tape.apply("l2_norm_rows", x)
    if np.any(norms.value <= NORM_EPS):
        logger.warning(
            "guarded cosine: %d zero-norm rows use similarity 0 against all candidates",
            int(np.sum(norms.value <= NORM_EPS)),
        )
    return tape.apply("mul_elementwise", x, tape.apply("reciprocal", norms))


def infonce_loss(
    tape: Tape, a: Tensor, b: Tensor, batch_rows: np.ndarray, temperature: float
) -> Tensor:
    """Symmetric contrastive loss over the batch rows.

    Row i of A and row i of B form the positive pair; all other batch rows of
    the opposite matrix are the negatives. Similarity is cosine divided by the
    temperature; the two directions (A against B, B against A) are averaged.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if a.value.shape != b.value.shape:
        raise ValueError("matrices must share a shape")
    rows = np.asarray(batch_rows, dtype=np.int64)
    n = rows.size
    if n == 0:
        raise ValueError("batch_rows must be nonempty")
    a_hat = _normalize_rows(tape, tape.apply("row_gather", a, indices=rows))
    b_hat = _normalize_rows(tape, tape.apply("row_gather", b, indices=rows))
    sim = tape.apply(
        "scale", tape.apply("matmul", a_hat, tape.apply("transpose", b_hat)), 1.0 / temperature
    )
    pos = _row_dot(tape, a_hat, b_hat, factor=1.0 / temperature)

    def direction(sim_matrix: Tensor) -> Tensor:
        lse = _logsumexp_rows(tape, sim_matrix)
        return tape.apply("scale", tape.apply("sum", tape.apply("sub", lse, pos)), 1.0 / n)

    loss_ab = direction(sim)
    loss_ba = direction(tape.apply("transpose", sim))
    return tape.apply("scale", tape.apply("add", loss_ab, loss_ba), 0.5)


def median_sq_dist(x: np.ndarray) -> float:
    """Median of pairwise squared distances (upper triangle), floored at 1.0
    when degenerate. The conventional bandwidth heuristic."""
    n = x.shape[0]
    if n < 2:
        return 1.0
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    med = float(np.median(d2[np.triu_indices(n, k=1)]))
    return med if med > 1e-12 else 1.0


def _kernel_matrix(tape: Tape, x: Tensor, config: KernelConfig) -> Tensor:
    gram = tape.apply("matmul", x, tape.apply("transpose", x))
    if config.kind == "linear":
        return gram
    sq = _row_dot(tape, x, x)
    d2 = tape.apply("add", tape.apply("scale", gram, -2.0), sq)  # + |x_i|^2 down rows
    d2 = tape.apply("add", d2, tape.apply("transpose", sq))  # + |x_j|^2 across columns
    bandwidth = config.bandwidth if config.bandwidth is not None else median_sq_dist(x.value)
    return tape.apply("exp", tape.apply("scale", d2, -0.5 / bandwidth))


def _center(tape: Tape, k: Tensor) -> Tensor:
    """Double centering, the dense equivalent of H K H with H = I - 11^T/n."""
    n = k.value.shape[0]
    row_means = tape.apply("mean_rows", k)
    col_means = tape.apply("transpose", tape.apply("mean_rows", tape.apply("transpose", k)))
    total = tape.apply("scale", tape.apply("sum", k), 1.0 / (n * n))
    centered = tape.apply("sub", tape.apply("sub", k, row_means), col_means)
    return tape.apply("add", centered, total)


def hsic_value(
    tape: Tape, a: Tensor, b: Tensor, batch_rows: np.ndarray, kernel_config: KernelConfig
) -> Tensor:
    """Empirical kernel dependence of the two matrices restricted to the batch
    rows: tr(K_A H K_B H) / (n - 1)^2 with double centering H."""
    rows = np.asarray(batch_rows, dtype=np.int64)
    n = rows.size
    if n < 2:
        raise ValueError("dependence estimate needs at least 2 batch rows")
    k_a = _kernel_matrix(tape, tape.apply("row_gather", a, indices=rows), kernel_config)
    k_b = _kernel_matrix(tape, tape.apply("row_gather", b, indices=rows), kernel_config)
    a_c = _center(tape, k_a)
    b_c = _center(tape, k_b)
    trace = tape.apply("sum", tape.apply("mul_elementwise", a_c, tape.apply("transpose", b_c)))
    return tape.apply("scale", trace, 1.0 / ((n - 1) ** 2))


def recommendation_loss(tape: Tape, outputs: ForwardOutputs, batch: BatchIndexSet) -> Tensor:
    """Sampled-softmax cross-entropy: per instance the positive competes with
    the instance's sampled negatives."""
    final = outputs.final
    user_rows = batch.users
    users = tape.apply("row_gather", final, indices=user_rows)
    pos = tape.apply("row_gather", final, indices=outputs.num_users + batch.pos_items)
    pos_logit = _row_dot(tape, users, pos)
    cols = [pos_logit]
    for j in range(batch.n_neg):
        neg = tape.apply("row_gather", final, indices=outputs.num_users + batch.neg_items[:, j])
        cols.append(_row_dot(tape, users, neg))
    logits = cols[0] if len(cols) == 1 else tape.apply("concat_cols", *cols)
    lse = _logsumexp_rows(tape, logits)
    return tape.apply(
        "scale", tape.apply("sum", tape.apply("sub", lse, pos_logit)), 1.0 / batch.size
    )


def preservation_loss(
    tape: Tape, outputs: ForwardOutputs, batch_rows: np.ndarray, temperature: float
) -> Tensor:
    """Contrast the final representation against the unified stage and every
    behavior stage: B + 1 InfoNCE terms."""
    total = infonce_loss(tape, outputs.unified, outputs.final, batch_rows, temperature)
    for name in outputs.schema.names:
        term = infonce_loss(tape, outputs.behavior[name], outputs.final, batch_rows, temperature)
        total = tape.apply("add", total, term)
    return total


def compression_loss(
    tape: Tape,
    outputs: ForwardOutputs,
    base: Tensor,
    batch_rows: np.ndarray,
    kernel_config: KernelConfig,
) -> Tensor:
    """Decorrelate each stage from its input stage: 1 + B + 2(B - 1) HSIC terms."""
    total = hsic_value(tape, outputs.unified, base, batch_rows, kernel_config)
    for name in outputs.schema.names:
        term = hsic_value(tape, outputs.behavior[name], outputs.unified, batch_rows, kernel_config)
        total = tape.apply("add", total, term)
    for name in outputs.schema.auxiliary:
        for kind in ("inter", "diff"):
            term = hsic_value(
                tape, outputs.components[name][kind], outputs.behavior[name], batch_rows, kernel_config
            )
            total = tape.apply("add", total, term)
    return total


def parameter_penalty(tape: Tape, param_leaves: dict[str, Tensor]) -> Tensor:
    """Squared L2 norm of every trainable parameter."""
    if not param_leaves:
        raise ValueError("no trainable parameters")
    total = None
    for leaf in param_leaves.values():
        term = tape.apply("sum", tape.apply("mul_elementwise", leaf, leaf))
        total = term if total is None else tape.apply("add", total, term)
    return total


def total_objective(
    tape: Tape,
    rec: Tensor,
    pres: Tensor,
    comp: Tensor,
    reg: Tensor,
    alpha: float,
    beta: float,
    reg_coeff: float,
) -> tuple[Tensor, LossBreakdown]:
    """total = rec + alpha * pres + beta * comp + reg_coeff * reg (exactly)."""
    if min(alpha, beta, reg_coeff) < 0:
        raise ValueError("loss coefficients must be nonnegative")
    total = tape.apply("add", rec, tape.apply("scale", pres, alpha))
    total = tape.apply("add", total, tape.apply("scale", comp, beta))
    total = tape.apply("add", total, tape.apply("scale", reg, reg_coeff))
    breakdown = LossBreakdown(
        rec=rec.item(),
        pres=pres.item(),
        comp=comp.item(),
        reg=reg.item(),
        total=total.item(),
        alpha=alpha,
        beta=beta,
        reg_coeff=reg_coeff,
    )
    return total, breakdown
