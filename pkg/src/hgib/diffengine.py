"""Dense float64 computation substrate with reverse-mode gradient accumulation.

Every value is a 2-D float64 matrix. Primitive applications are appended to a
Tape (an explicit computation record); ``Tape.backward`` replays the record in
reverse, pushing adjoints from the loss back to every contributing node and
into the ParameterSet accumulators of parameter leaves. The record approach
keeps the substrate auditable: each primitive kind has exactly one forward
rule and one adjoint rule, both in this file, and every adjoint is covered by
central finite differences in the test suite.

Any primitive that produces a NaN/Inf raises NumericalError naming the kind;
callers abort the step rather than training on garbage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import NumericalError
from .graphcore import InteractionGraph, norm_coefficients

# Row norms below this are treated as zero by reciprocal/l2_norm_rows guards.
NORM_EPS = 1e-12


class ParameterSet:
    """Named trainable matrices plus persistent gradient accumulators.

    Accumulators have the same shape as their parameters, start at zero, and
    keep accumulating across backward calls until zero_grads() is invoked.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._values:
            raise ValueError(f"parameter '{name}' already registered")
        arr = np.array(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"parameter '{name}' must be a 2-D matrix, got ndim={arr.ndim}")
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def names(self) -> tuple[str, ...]:
        return tuple(self._values)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value: np.ndarray) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise ValueError(f"shape mismatch for parameter '{name}'")
        self._values[name] = np.array(arr)

    def accumulate_grad(self, name: str, g: np.ndarray) -> None:
        if g.shape != self._grads[name].shape:
            raise ValueError(f"gradient shape mismatch for parameter '{name}'")
        self._grads[name] += g

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, value in self._values.items():
            out._values[name] = value.copy()
            out._grads[name] = self._grads[name].copy()
        return out


class Tensor:
    """One node on a computation record: a matrix value plus its adjoint slot."""

    __slots__ = ("value", "kind", "inputs", "ctx", "grad", "requires_grad", "tape", "_idx")

    def __init__(self, value, kind, inputs=(), ctx=None, requires_grad=False, tape=None):
        self.value: np.ndarray = value
        self.kind: str = kind
        self.inputs: tuple[Tensor, ...] = inputs
        self.ctx: dict = ctx if ctx is not None else {}
        self.grad: np.ndarray | None = None
        self.requires_grad: bool = requires_grad
        self.tape: Tape | None = tape
        self._idx: int = -1

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ValueError(f"item() requires a 1x1 value, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Tensor(kind={self.kind!r}, shape={self.value.shape})"


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ValueError(f"tape values must be 2-D matrices, got ndim={arr.ndim}")
    return arr


def _check_broadcast(a_shape, b_shape, kind):
    # Second operand may match exactly or broadcast from (n,1), (1,c), or (1,1).
    if a_shape == b_shape:
        return
    rows_ok = b_shape[0] == a_shape[0] or b_shape[0] == 1
    cols_ok = b_shape[1] == a_shape[1] or b_shape[1] == 1
    if not (rows_ok and cols_ok):
        raise ValueError(f"{kind}: shapes {a_shape} and {b_shape} do not conform")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] > 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] > 1:
        out = out.sum(axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# Forward rules. Each returns the output matrix; anything the adjoint needs
# beyond inputs/output is stashed in node.ctx by apply().
# ---------------------------------------------------------------------------


def _fwd_matmul(a, b, ctx):
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions {a.shape} x {b.shape} do not conform")
    return a @ b


def _fwd_sparse_propagate(w, x, ctx):
    graph: InteractionGraph = ctx["graph"]
    num_edges = graph.num_edges
    if w.shape != (num_edges, 1):
        raise ValueError(f"sparse_propagate: weights must be ({num_edges}, 1), got {w.shape}")
    n = graph.num_users + graph.num_items
    if x.shape[0] != n:
        raise ValueError(f"sparse_propagate: embeddings must have {n} rows, got {x.shape[0]}")
    coeffs, deg_u, deg_v, ok = norm_coefficients(
        graph.edges, w[:, 0], graph.num_users, graph.num_items
    )
    eu = graph.edges[:, 0]
    ev = graph.edges[:, 1] + graph.num_users
    rows = np.concatenate([eu, ev])
    cols = np.concatenate([ev, eu])
    data = np.concatenate([coeffs, coeffs])
    op = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    ctx["coeffs"] = coeffs
    ctx["deg_u"] = deg_u
    ctx["deg_v"] = deg_v
    ctx["active"] = ok
    ctx["operator"] = op
    return op @ x


def _fwd_row_gather(x, ctx):
    idx = ctx["indices"]
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ValueError("row_gather: index out of range")
    return x[idx]


def _fwd_softmax_rows(x, ctx):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _fwd_concat_rows(*xs, ctx):
    cols = xs[0].shape[1]
    for x in xs[1:]:
        if x.shape[1] != cols:
            raise ValueError("concat_rows: column counts differ")
    return np.concatenate(xs, axis=0)


def _fwd_concat_cols(*xs, ctx):
    rows = xs[0].shape[0]
    for x in xs[1:]:
        if x.shape[0] != rows:
            raise ValueError("concat_cols: row counts differ")
    return np.concatenate(xs, axis=1)


def _fwd_slice_cols(x, ctx):
    start, stop = ctx["start"], ctx["stop"]
    if not (0 <= start < stop <= x.shape[1]):
        raise ValueError(f"slice_cols: [{start}, {stop}) invalid for {x.shape[1]} columns")
    return x[:, start:stop].copy()


def _fwd_reciprocal(x, ctx):
    # Guarded: entries with |x| <= NORM_EPS map to 0 (and get zero gradient).
    out = np.zeros_like(x)
    mask = np.abs(x) > NORM_EPS
    out[mask] = 1.0 / x[mask]
    return out


_FORWARD = {
    "matmul": _fwd_matmul,
    "sparse_propagate": _fwd_sparse_propagate,
    "row_gather": _fwd_row_gather,
    "sigmoid": lambda x, ctx: expit(x),
    "exp": lambda x, ctx: np.exp(x),
    "log": lambda x, ctx: np.log(x),
    "softmax_rows": _fwd_softmax_rows,
    "add": lambda a, b, ctx: (_check_broadcast(a.shape, b.shape, "add"), a + b)[1],
    "sub": lambda a, b, ctx: (_check_broadcast(a.shape, b.shape, "sub"), a - b)[1],
    "mul_elementwise": lambda a, b, ctx: (_check_broadcast(a.shape, b.shape, "mul_elementwise"), a * b)[1],
    "scale": lambda x, ctx: x * ctx["factor"],
    "sum": lambda x, ctx: np.array([[x.sum()]]),
    "mean_rows": lambda x, ctx: x.mean(axis=1, keepdims=True),
    "l2_norm_rows": lambda x, ctx: np.sqrt((x * x).sum(axis=1, keepdims=True)),
    "concat_rows": _fwd_concat_rows,
    "concat_cols": _fwd_concat_cols,
    "slice_cols": _fwd_slice_cols,
    "transpose": lambda x, ctx: x.T.copy(),
    "reciprocal": _fwd_reciprocal,
    "clip": lambda x, ctx: np.clip(x, ctx["lo"], ctx["hi"]),
}


# ---------------------------------------------------------------------------
# Adjoint rules. Each takes (g, node) and returns one gradient per input
# (None when an input gets no gradient).
# ---------------------------------------------------------------------------


def _adj_matmul(g, node):
    a, b = (t.value for t in node.inputs)
    return g @ b.T, a.T @ g


def _adj_sparse_propagate(g, node):
    """Two-term adjoint: message passing for the embeddings, and sensitivity of
    the normalization coefficients (numerator and both weighted degrees) for
    the edge weights."""
    graph: InteractionGraph = node.ctx["graph"]
    coeffs = node.ctx["coeffs"]
    deg_u = node.ctx["deg_u"]
    deg_v = node.ctx["deg_v"]
    ok = node.ctx["active"]
    op = node.ctx["operator"]
    x = node.inputs[1].value
    eu = graph.edges[:, 0]
    ev = graph.edges[:, 1]
    item_rows = ev + graph.num_users

    grad_x = op @ g  # the operator is symmetric by construction

    # Sensitivity of the loss to each normalization coefficient: the edge
    # carries messages in both directions.
    s = (g[eu] * x[item_rows]).sum(axis=1) + (g[item_rows] * x[eu]).sum(axis=1)

    sc = s * coeffs
    pu = np.zeros(graph.num_users)
    active_u = deg_u > 0
    pu[active_u] = np.bincount(eu, weights=sc, minlength=graph.num_users)[active_u] / deg_u[active_u]
    qv = np.zeros(graph.num_items)
    active_v = deg_v > 0
    qv[active_v] = np.bincount(ev, weights=sc, minlength=graph.num_items)[active_v] / deg_v[active_v]

    grad_w = np.zeros((graph.num_edges, 1))
    denom = np.sqrt(deg_u[eu][ok] * deg_v[ev][ok])
    grad_w[ok, 0] = s[ok] / denom - 0.5 * (pu[eu[ok]] + qv[ev[ok]])
    return grad_w, grad_x


def _adj_row_gather(g, node):
    x = node.inputs[0].value
    out = np.zeros_like(x)
    np.add.at(out, node.ctx["indices"], g)
    return (out,)


def _adj_softmax_rows(g, node):
    y = node.value
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def _adj_l2_norm_rows(g, node):
    x = node.inputs[0].value
    y = node.value
    return (g * (x / np.maximum(y, NORM_EPS)),)


def _adj_concat_rows(g, node):
    grads = []
    start = 0
    for t in node.inputs:
        n = t.value.shape[0]
        grads.append(g[start : start + n])
        start += n
    return tuple(grads)


def _adj_concat_cols(g, node):
    grads = []
    start = 0
    for t in node.inputs:
        c = t.value.shape[1]
        grads.append(g[:, start : start + c])
        start += c
    return tuple(grads)


def _adj_slice_cols(g, node):
    x = node.inputs[0].value
    out = np.zeros_like(x)
    out[:, node.ctx["start"] : node.ctx["stop"]] = g
    return (out,)


def _adj_reciprocal(g, node):
    y = node.value  # zero where guarded, so the gradient vanishes there too
    return (-g * y * y,)


def _adj_clip(g, node):
    x = node.inputs[0].value
    inside = (x > node.ctx["lo"]) & (x < node.ctx["hi"])
    return (g * inside,)


_ADJOINT = {
    "matmul": _adj_matmul,
    "sparse_propagate": _adj_sparse_propagate,
    "row_gather": _adj_row_gather,
    "sigmoid": lambda g, node: (g * node.value * (1.0 - node.value),),
    "exp": lambda g, node: (g * node.value,),
    "log": lambda g, node: (g / node.inputs[0].value,),
    "softmax_rows": _adj_softmax_rows,
    "add": lambda g, node: (g, _reduce_to(g, node.inputs[1].value.shape)),
    "sub": lambda g, node: (g, -_reduce_to(g, node.inputs[1].value.shape)),
    "mul_elementwise": lambda g, node: (
        _reduce_to(g * np.broadcast_to(node.inputs[1].value, g.shape), node.inputs[0].value.shape),
        _reduce_to(g * node.inputs[0].value, node.inputs[1].value.shape),
    ),
    "scale": lambda g, node: (g * node.ctx["factor"],),
    "sum": lambda g, node: (np.full_like(node.inputs[0].value, g[0, 0]),),
    "mean_rows": lambda g, node: (
        np.broadcast_to(g / node.inputs[0].value.shape[1], node.inputs[0].value.shape).copy(),
    ),
    "l2_norm_rows": _adj_l2_norm_rows,
    "concat_rows": _adj_concat_rows,
    "concat_cols": _adj_concat_cols,
    "slice_cols": _adj_slice_cols,
    "transpose": lambda g, node: (g.T.copy(),),
    "reciprocal": _adj_reciprocal,
    "clip": _adj_clip,
}

PRIMITIVE_KINDS = tuple(_FORWARD)


class Tape:
    """Ordered record of primitive applications (a Wengert list).

    A tape is confined to one worker; create a fresh one per forward pass.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, node: Tensor) -> Tensor:
        node._idx = len(self._nodes)
        node.tape = self
        self._nodes.append(node)
        return node

    def constant(self, value) -> Tensor:
        """A non-differentiable leaf."""
        return self._record(Tensor(_as_matrix(value), kind="const"))

    def parameter(self, params: ParameterSet, name: str) -> Tensor:
        """A trainable leaf; backward() accumulates its adjoint into `params`."""
        node = Tensor(params.value(name), kind="param", requires_grad=True)
        node.ctx["params"] = params
        node.ctx["name"] = name
        return self._record(node)

    def apply(self, kind: str, *inputs: Tensor, **ctx) -> Tensor:
        """Apply one primitive and record it.

        Rejects unknown kinds, inputs from other tapes, shape mismatches, and
        non-finite outputs (naming the producing kind).
        """
        if kind not in _FORWARD:
            raise ValueError(f"unknown primitive kind '{kind}'")
        for t in inputs:
            if not isinstance(t, Tensor) or t.tape is not self:
                raise ValueError(f"{kind}: inputs must be tensors recorded on this tape")
        values = [t.value for t in inputs]
        with np.errstate(all="ignore"):  # non-finite outputs are rejected below
            out = _FORWARD[kind](*values, ctx=ctx)
        out = np.asarray(out, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"non-finite output from primitive '{kind}'")
        node = Tensor(
            out,
            kind=kind,
            inputs=tuple(inputs),
            ctx=ctx,
            requires_grad=any(t.requires_grad for t in inputs),
        )
        return self._record(node)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(parameter) into every parameter leaf's ParameterSet.

        Calling twice without resetting the accumulators adds the gradients again.
        """
        if loss.tape is not self or self._nodes[loss._idx] is not loss:
            raise ValueError("loss was not produced by this record")
        if loss.value.shape != (1, 1):
            raise ValueError(f"loss must be a 1x1 scalar, got shape {loss.value.shape}")
        upto = loss._idx + 1
        for node in self._nodes[:upto]:
            node.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self._nodes[:upto]):
            if node.grad is None or not node.requires_grad:
                continue
            if node.kind == "param":
                node.ctx["params"].accumulate_grad(node.ctx["name"], node.grad)
                continue
            grads = _ADJOINT[node.kind](node.grad, node)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    num_coords: int
    tol: float
    worst_coord: tuple[str, int, int] | None

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_rel_error) and self.max_rel_error < self.tol


def finite_diff_check(
    loss_builder,
    params: ParameterSet,
    h: float = 1e-5,
    tol: float = 1e-4,
    num_coords: int = 64,
    rng: np.random.Generator | None = None,
) -> FiniteDiffReport:
    """Compare analytic gradients against central finite differences.

    loss_builder(params) must build a fresh record and return the 1x1 loss
    tensor. Relative error per sampled coordinate is
    |analytic - central_fd| / max(1, |central_fd|). A non-finite loss during
    probing is reported as max_rel_error = inf rather than raised.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if rng is None:
        rng = np.random.default_rng(0)

    params.zero_grads()
    loss = loss_builder(params)
    loss.tape.backward(loss)
    analytic = {name: params.grad(name).copy() for name in params.names()}
    params.zero_grads()

    coords = [
        (name, i, j)
        for name in params.names()
        for i in range(params.value(name).shape[0])
        for j in range(params.value(name).shape[1])
    ]
    if len(coords) > num_coords:
        picked = rng.choice(len(coords), size=num_coords, replace=False)
        coords = [coords[int(k)] for k in picked]

    def probe(name, i, j, delta):
        value = params.value(name)
        original = value[i, j]
        value[i, j] = original + delta
        try:
            return loss_builder(params).item()
        finally:
            value[i, j] = original

    max_rel = 0.0
    worst = None
    for name, i, j in coords:
        try:
            f_plus = probe(name, i, j, +h)
            f_minus = probe(name, i, j, -h)
        except NumericalError:
            return FiniteDiffReport(math.inf, len(coords), tol, (name, i, j))
        fd = (f_plus - f_minus) / (2.0 * h)
        if not math.isfinite(fd):
            return FiniteDiffReport(math.inf, len(coords), tol, (name, i, j))
        rel = abs(analytic[name][i, j] - fd) / max(1.0, abs(fd))
        if rel > max_rel:
            max_rel = rel
            worst = (name, i, j)
    return FiniteDiffReport(max_rel, len(coords), tol, worst)
