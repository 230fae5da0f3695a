"""Hierarchical encoder stack: unified -> behavior-specific -> behavior-component
encoders (each a refinement encoder), fused by two-stage target attention.

The stack keeps every intermediate embedding matrix because the training
objective contrasts and decorrelates specific pairs of stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import gre
from .diffengine import ParameterSet, Tape, Tensor
from .graphcore import (
    BehaviorSchema,
    InteractionGraph,
    difference_graphs,
    intersect_graphs,
    union_graphs,
)

EMBEDDING = "embedding"
ATTN_QUERY = "attn_query_proj"
ATTN_KEY = "attn_key_proj"

# Component kinds: intersection with the target graph, and difference from it.
COMPONENT_KINDS = ("inter", "diff")


def component_label(behavior: str, kind: str, target: str) -> str:
    return f"{behavior}∩{target}" if kind == "inter" else f"{behavior}/{target}"


@dataclass
class HgibParams:
    """Trainable state: the embedding table (users stacked above items) plus
    optional attention projections."""

    num_users: int
    num_items: int
    dim: int
    params: ParameterSet

    @classmethod
    def init(
        cls,
        num_users: int,
        num_items: int,
        dim: int,
        rng: np.random.Generator,
        init_scale: float = 0.05,
        learned_attention: bool = False,
    ) -> "HgibParams":
        if dim < 1:
            raise ValueError("embedding dim must be at least 1")
        params = ParameterSet()
        table = rng.uniform(-init_scale, init_scale, size=(num_users + num_items, dim))
        params.add(EMBEDDING, table)
        if learned_attention:
            # Identity init keeps the switch a no-op until trained.
            params.add(ATTN_QUERY, np.eye(dim))
            params.add(ATTN_KEY, np.eye(dim))
        return cls(num_users=num_users, num_items=num_items, dim=dim, params=params)

    @property
    def embedding(self) -> np.ndarray:
        return self.params.value(EMBEDDING)

    @property
    def learned_attention(self) -> bool:
        return ATTN_QUERY in self.params

    def copy(self) -> "HgibParams":
        return HgibParams(self.num_users, self.num_items, self.dim, self.params.copy())


@dataclass(frozen=True)
class HierarchyGraphs:
    """The graph family driving the encoder stack.

    unified is the union of all behavior graphs; for each auxiliary behavior b
    the component graphs (b intersect target, b minus target) partition b's
    edge set. Both facts are asserted at build time.
    """

    schema: BehaviorSchema
    unified: InteractionGraph
    per_behavior: dict[str, InteractionGraph]
    components: dict[str, dict[str, InteractionGraph]]

    @property
    def num_users(self) -> int:
        return self.unified.num_users

    @property
    def num_items(self) -> int:
        return self.unified.num_items


def build_hierarchy(
    schema: BehaviorSchema, graphs: Mapping[str, InteractionGraph]
) -> HierarchyGraphs:
    for name in schema.names:
        if name not in graphs:
            raise ValueError(f"missing interaction graph for behavior '{name}'")
    ordered = {name: graphs[name] for name in schema.names}
    unified = union_graphs(list(ordered.values()))
    target_graph = ordered[schema.target]
    components: dict[str, dict[str, InteractionGraph]] = {}
    for name in schema.auxiliary:
        inter = intersect_graphs(ordered[name], target_graph)
        diff = difference_graphs(ordered[name], target_graph)
        if inter.num_edges + diff.num_edges != ordered[name].num_edges:
            raise AssertionError(f"component graphs do not partition behavior '{name}'")
        components[name] = {"inter": inter, "diff": diff}
    return HierarchyGraphs(
        schema=schema, unified=unified, per_behavior=ordered, components=components
    )


@dataclass
class ForwardOutputs:
    """Every intermediate encoder output, retained for losses and diagnostics."""

    schema: BehaviorSchema
    num_users: int
    num_items: int
    base: Tensor  # the embedding-table leaf
    unified: Tensor
    behavior: dict[str, Tensor]
    components: dict[str, dict[str, Tensor]]
    fused: Tensor
    final: Tensor
    param_leaves: dict[str, Tensor] = field(default_factory=dict)


def target_attention(
    tape: Tape,
    query: Tensor,
    keys: list[Tensor],
    query_proj: Tensor | None = None,
    key_proj: Tensor | None = None,
) -> Tensor:
    """Per-node softmax aggregation of key matrices under a query matrix.

    score_j(i) = (q_i . k_{j,i}) / sqrt(d); the output row is the
    softmax-weighted combination of the raw key rows.
    """
    if not keys:
        raise ValueError("target attention needs at least one key matrix")
    rows, d = query.value.shape
    for k in keys:
        if k.value.shape != (rows, d):
            raise ValueError("query and keys must share the same shape")
    q = query if query_proj is None else tape.apply("matmul", query, query_proj)
    inv_sqrt_d = 1.0 / np.sqrt(d)
    score_cols = []
    for k in keys:
        kp = k if key_proj is None else tape.apply("matmul", k, key_proj)
        prod = tape.apply("mul_elementwise", q, kp)
        # per-row inner product = d * per-row mean, scaled by 1/sqrt(d)
        score_cols.append(tape.apply("scale", tape.apply("mean_rows", prod), d * inv_sqrt_d))
    scores = score_cols[0] if len(score_cols) == 1 else tape.apply("concat_cols", *score_cols)
    weights = tape.apply("softmax_rows", scores)
    out = None
    for j, k in enumerate(keys):
        w_j = tape.apply("slice_cols", weights, start=j, stop=j + 1)
        term = tape.apply("mul_elementwise", k, w_j)
        out = term if out is None else tape.apply("add", out, term)
    return out


def forward(
    tape: Tape,
    params: HgibParams,
    hierarchy: HierarchyGraphs,
    config: gre.RefinementConfig,
    rng: np.random.Generator | None = None,
    no_gre: bool = False,
) -> ForwardOutputs:
    """Run the full encoder stack and retain every stage.

    With no_gre the refinement encoders are replaced by unit-weight
    propagation (no learnable weights, no gating).
    """
    schema = hierarchy.schema
    base = tape.parameter(params.params, EMBEDDING)
    leaves = {EMBEDDING: base}
    q_proj = k_proj = None
    if params.learned_attention:
        q_proj = tape.parameter(params.params, ATTN_QUERY)
        k_proj = tape.parameter(params.params, ATTN_KEY)
        leaves[ATTN_QUERY] = q_proj
        leaves[ATTN_KEY] = k_proj

    def encode(graph: InteractionGraph, source: Tensor) -> Tensor:
        if no_gre:
            return gre.plain_forward(tape, source, graph, config.num_prop_layers)
        return gre.gre_forward(tape, source, graph, config, rng=rng)

    unified = encode(hierarchy.unified, base)
    behavior = {name: encode(hierarchy.per_behavior[name], unified) for name in schema.names}
    components: dict[str, dict[str, Tensor]] = {}
    for name in schema.auxiliary:
        components[name] = {
            kind: encode(hierarchy.components[name][kind], behavior[name])
            for kind in COMPONENT_KINDS
        }

    fused = target_attention(
        tape,
        behavior[schema.target],
        [behavior[name] for name in schema.names],
        query_proj=q_proj,
        key_proj=k_proj,
    )
    component_keys = [
        components[name][kind] for name in schema.auxiliary for kind in COMPONENT_KINDS
    ]
    if component_keys:
        final = target_attention(tape, fused, component_keys, query_proj=q_proj, key_proj=k_proj)
    else:
        final = fused  # no auxiliary behaviors: nothing to aggregate in stage 2

    return ForwardOutputs(
        schema=schema,
        num_users=hierarchy.num_users,
        num_items=hierarchy.num_items,
        base=base,
        unified=unified,
        behavior=behavior,
        components=components,
        fused=fused,
        final=final,
        param_leaves=leaves,
    )


def score_items(
    outputs: ForwardOutputs, user_index: int, item_indices: np.ndarray
) -> np.ndarray:
    """Inner-product scores of one user row against the given item rows."""
    final = outputs.final.value
    if not 0 <= user_index < outputs.num_users:
        raise ValueError(f"user index {user_index} out of range")
    items = np.asarray(item_indices, dtype=np.int64)
    if items.size and (items.min() < 0 or items.max() >= outputs.num_items):
        raise ValueError("item index out of range")
    return final[outputs.num_users + items] @ final[user_index]
