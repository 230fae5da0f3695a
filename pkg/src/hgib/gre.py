"""Graph refinement encoder.

Pipeline per invocation: sigmoid edge weights from endpoint embedding inner
products, deterministic pruning at threshold tau, a stochastic straight-through
binary-concrete gate during training (deterministic pass-through at eval), then
symmetric-normalized propagation with the readout averaged over layers 0..L.
Gradients reach the embeddings both through the propagated messages and through
the edge weights themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .diffengine import Tape, Tensor
from .graphcore import InteractionGraph

# Clamp bound used only when gate logits must be reconstructed from weights.
_LOGIT_CLAMP = 1e-9


@dataclass(frozen=True)
class RefinementConfig:
    tau: float = 0.05
    gumbel_temperature: float = 0.5
    num_prop_layers: int = 1
    mode: str = "eval"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.gumbel_temperature <= 0.0:
            raise ValueError("gumbel_temperature must be positive")
        if self.num_prop_layers < 1:
            raise ValueError("num_prop_layers must be at least 1")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")

    def train_mode(self) -> "RefinementConfig":
        return replace(self, mode="train")

    def eval_mode(self) -> "RefinementConfig":
        return replace(self, mode="eval")


def edge_scores(tape: Tape, embeddings: Tensor, graph: InteractionGraph) -> Tensor:
    """Per-edge inner products e_u . e_v, shape (E, 1)."""
    d = embeddings.value.shape[1]
    users = tape.apply("row_gather", embeddings, indices=graph.edges[:, 0])
    items = tape.apply("row_gather", embeddings, indices=graph.edges[:, 1] + graph.num_users)
    prod = tape.apply("mul_elementwise", users, items)
    return tape.apply("scale", tape.apply("mean_rows", prod), float(d))


def edge_weights(
    tape: Tape,
    embeddings: Tensor,
    graph: InteractionGraph,
    tau: float,
    scores: Tensor | None = None,
) -> Tensor:
    """Refined edge weights: sigmoid(e_u . e_v) where above tau, else 0.

    Differentiable through the surviving entries; the threshold itself carries
    no gradient (measure-zero event).
    """
    if scores is None:
        scores = edge_scores(tape, embeddings, graph)
    sig = tape.apply("sigmoid", scores)
    keep = tape.constant((sig.value > tau).astype(np.float64))
    return tape.apply("mul_elementwise", sig, keep)


def refine_mask(
    tape: Tape,
    weights: Tensor,
    config: RefinementConfig,
    rng: np.random.Generator | None = None,
    scores: Tensor | None = None,
) -> Tensor:
    """Per-edge gate over refined weights.

    Train mode: for edges with w > 0, a binary-concrete sample with keep
    probability exactly w (logistic noise added to the weight logit, hard
    threshold at 0.5, straight-through gradient via the soft sample). Eval
    mode: deterministic 1 for every w > 0. Zero-weight edges are gated 0 in
    both modes.
    """
    kept = weights.value > 0.0
    if config.mode == "eval":
        return tape.constant(kept.astype(np.float64))
    if rng is None:
        raise ValueError("train-mode gating needs a random generator")

    if scores is None:
        # Reconstruct the weight logit; clamping only matters for the pruned
        # entries (w = 0), whose gates are masked off below anyway.
        clamped = tape.apply("clip", weights, lo=_LOGIT_CLAMP, hi=1.0 - _LOGIT_CLAMP)
        complement = tape.apply(
            "sub", tape.constant(np.ones_like(weights.value)), clamped
        )
        logits = tape.apply("sub", tape.apply("log", clamped), tape.apply("log", complement))
    else:
        logits = scores  # sigmoid pre-image: logit(sigma(x)) = x

    u = rng.uniform(size=weights.value.shape)
    noise = np.log(u) - np.log1p(-u)  # Logistic(0, 1), a difference of Gumbels
    shifted = tape.apply("add", logits, tape.constant(noise))
    soft = tape.apply("sigmoid", tape.apply("scale", shifted, 1.0 / config.gumbel_temperature))
    hard = ((shifted.value > 0.0) & kept).astype(np.float64)
    # Straight-through: the value is the hard gate, the gradient follows soft.
    return tape.apply("add", soft, tape.constant(hard - soft.value))


def propagate(
    tape: Tape,
    graph: InteractionGraph,
    refined_weights: Tensor,
    embeddings: Tensor,
    num_prop_layers: int,
) -> Tensor:
    """Mean over layers 0..L of symmetric-normalized weighted propagation."""
    if num_prop_layers < 1:
        raise ValueError("num_prop_layers must be at least 1")
    acc = embeddings
    current = embeddings
    for _ in range(num_prop_layers):
        current = tape.apply("sparse_propagate", refined_weights, current, graph=graph)
        acc = tape.apply("add", acc, current)
    return tape.apply("scale", acc, 1.0 / (num_prop_layers + 1))


def gre_forward(
    tape: Tape,
    embeddings: Tensor,
    graph: InteractionGraph,
    config: RefinementConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Full refinement encoder: weights, gate, and propagation."""
    scores = edge_scores(tape, embeddings, graph)
    weights = edge_weights(tape, embeddings, graph, config.tau, scores=scores)
    gate = refine_mask(tape, weights, config, rng=rng, scores=scores)
    refined = tape.apply("mul_elementwise", gate, weights)
    return propagate(tape, graph, refined, embeddings, config.num_prop_layers)


def plain_forward(
    tape: Tape,
    embeddings: Tensor,
    graph: InteractionGraph,
    num_prop_layers: int,
) -> Tensor:
    """Unit-weight propagation with no refinement and no gating."""
    ones = tape.constant(np.ones((graph.num_edges, 1)))
    return propagate(tape, graph, ones, embeddings, num_prop_layers)
