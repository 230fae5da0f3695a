"""Dataset ingestion, ID remapping, leave-one-out splitting, and synthetic
multi-behavior data generation.

File format: UTF-8 text, LF line endings, TAB-separated, two or three columns
(user_id, item_id, optional timestamp), no header. Raw IDs are arbitrary
tokens; dense indices are assigned in lexicographic token order so re-ingesting
the same files always yields identical ID maps.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .graphcore import BehaviorSchema, InteractionGraph, build_graph

# Synthetic generator densities (see generate_synthetic).
VIEW_P_WITHIN = 0.3
VIEW_P_ACROSS = 0.02
CART_KEEP = 0.3
BUY_FROM_CART_KEEP = 0.45


@dataclass(frozen=True)
class DatasetManifest:
    behaviors: tuple[str, ...]
    target: str
    files: dict[str, str]
    num_users: int | None = None
    num_items: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "behaviors", tuple(self.behaviors))
        if self.target not in self.behaviors:
            raise DataError(f"target behavior {self.target!r} not in {self.behaviors}")
        missing = [b for b in self.behaviors if b not in self.files]
        if missing:
            raise DataError(f"manifest lacks files for behaviors: {missing}")

    def schema(self) -> BehaviorSchema:
        return BehaviorSchema(names=self.behaviors, target_index=self.behaviors.index(self.target))

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str = ".") -> "DatasetManifest":
        try:
            behaviors = tuple(doc["behaviors"])
            target = doc["target"]
            files = {b: os.path.join(base_dir, p) for b, p in doc["files"].items()}
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed manifest: missing {exc}") from exc
        return cls(
            behaviors=behaviors,
            target=target,
            files=files,
            num_users=doc.get("num_users"),
            num_items=doc.get("num_items"),
        )

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc, base_dir=os.path.dirname(os.path.abspath(path)))


@dataclass
class RawDataset:
    """Parsed interactions with dense contiguous indices."""

    schema: BehaviorSchema
    num_users: int
    num_items: int
    edges: dict[str, np.ndarray]  # behavior -> (E, 2) dense indices, deduplicated
    timestamps: dict[str, np.ndarray | None]  # aligned with edges, or None
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]


@dataclass(frozen=True)
class SplitDataset:
    """Training graphs plus held-out target interactions."""

    schema: BehaviorSchema
    num_users: int
    num_items: int
    train_graphs: dict[str, InteractionGraph]
    test_pairs: np.ndarray
    validation_pairs: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    split_seed: int

    def __post_init__(self):
        target = self.train_graphs[self.schema.target]
        train_set = target.edge_set()
        for name, pairs in (("test", self.test_pairs), ("validation", self.validation_pairs)):
            for u, v in pairs:
                if (int(u), int(v)) in train_set:
                    raise DataError(f"{name} pair ({u}, {v}) leaks into the training graph")
        for u, _ in self.test_pairs:
            if target.user_adj[int(u)].size == 0:
                raise DataError(f"test user {u} has no target training edge")


def _parse_file(path: str, behavior: str):
    edges: dict[tuple[str, str], float | None] = {}
    expected_cols = None
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = [p.strip() for p in line.split("\t")]
            if len(parts) not in (2, 3) or any(p == "" for p in parts):
                raise DataError(f"{path}:{lineno}: malformed line {line!r}")
            if expected_cols is None:
                expected_cols = len(parts)
            elif len(parts) != expected_cols:
                raise DataError(
                    f"{path}:{lineno}: inconsistent column count ({len(parts)} vs {expected_cols})"
                )
            ts = None
            if len(parts) == 3:
                try:
                    ts = float(parts[2])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad timestamp {parts[2]!r}") from None
            key = (parts[0], parts[1])
            if ts is None:
                edges[key] = None
            else:
                prev = edges.get(key)
                edges[key] = ts if prev is None else max(prev, ts)  # keep latest
    return edges, expected_cols == 3


def load_dataset(manifest: DatasetManifest) -> RawDataset:
    """Parse every behavior file, remap IDs, and deduplicate.

    Returns dense 0-based indices assigned in lexicographic token order; for
    repeated (user, item) pairs the latest timestamp is kept.
    """
    parsed = {}
    has_ts = {}
    for behavior in manifest.behaviors:
        parsed[behavior], has_ts[behavior] = _parse_file(manifest.files[behavior], behavior)
    if not parsed[manifest.target]:
        raise DataError(f"target behavior file {manifest.files[manifest.target]!r} is empty")

    user_tokens = sorted({u for edges in parsed.values() for u, _ in edges})
    item_tokens = sorted({v for edges in parsed.values() for _, v in edges})
    user_index = {tok: i for i, tok in enumerate(user_tokens)}
    item_index = {tok: i for i, tok in enumerate(item_tokens)}

    if manifest.num_users is not None and manifest.num_users < len(user_tokens):
        raise DataError(
            f"manifest declares {manifest.num_users} users but files contain {len(user_tokens)}"
        )
    if manifest.num_items is not None and manifest.num_items < len(item_tokens):
        raise DataError(
            f"manifest declares {manifest.num_items} items but files contain {len(item_tokens)}"
        )
    num_users = manifest.num_users or len(user_tokens)
    num_items = manifest.num_items or len(item_tokens)

    edges = {}
    timestamps = {}
    for behavior, pairs in parsed.items():
        dense = np.array(
            sorted((user_index[u], item_index[v]) for u, v in pairs), dtype=np.int64
        ).reshape(-1, 2)
        edges[behavior] = dense
        if has_ts[behavior]:
            ts_map = {(user_index[u], item_index[v]): t for (u, v), t in pairs.items()}
            timestamps[behavior] = np.array([ts_map[(u, v)] for u, v in dense], dtype=np.float64)
        else:
            timestamps[behavior] = None

    return RawDataset(
        schema=manifest.schema(),
        num_users=num_users,
        num_items=num_items,
        edges=edges,
        timestamps=timestamps,
        user_ids=tuple(user_tokens),
        item_ids=tuple(item_tokens),
    )


def leave_one_out_split(raw: RawDataset, seed: int = 0) -> SplitDataset:
    """Hold out target interactions per user: with >= 3 edges the latest goes
    to test and the next-latest to validation; with exactly 2 the latest goes
    to test; otherwise everything stays in training. Auxiliary behaviors are
    untouched. When timestamps are absent the per-user order is seeded-random.
    """
    rng = np.random.default_rng(seed)
    target = raw.schema.target
    target_edges = raw.edges[target]
    target_ts = raw.timestamps[target]

    order = np.arange(target_edges.shape[0])
    by_user: dict[int, list[int]] = {}
    for idx in order:
        by_user.setdefault(int(target_edges[idx, 0]), []).append(int(idx))

    test, validation, train_idx = [], [], []
    for user in sorted(by_user):
        idxs = by_user[user]
        if len(idxs) >= 2:
            if target_ts is not None:
                # Latest last; timestamp ties broken by ascending item index.
                idxs = sorted(idxs, key=lambda i: (target_ts[i], int(target_edges[i, 1])))
            else:
                idxs = [idxs[j] for j in rng.permutation(len(idxs))]
        if len(idxs) >= 3:
            test.append(idxs[-1])
            validation.append(idxs[-2])
            train_idx.extend(idxs[:-2])
        elif len(idxs) == 2:
            test.append(idxs[-1])
            train_idx.extend(idxs[:-1])
        else:
            train_idx.extend(idxs)

    train_graphs = {}
    for behavior in raw.schema.names:
        if behavior == target:
            pairs = target_edges[np.array(sorted(train_idx), dtype=np.int64)] if train_idx else np.zeros((0, 2), np.int64)
        else:
            pairs = raw.edges[behavior]
        train_graphs[behavior] = build_graph(raw.num_users, raw.num_items, pairs)

    def as_pairs(indices: list[int]) -> np.ndarray:
        if not indices:
            return np.zeros((0, 2), dtype=np.int64)
        return target_edges[np.array(sorted(indices), dtype=np.int64)].copy()

    return SplitDataset(
        schema=raw.schema,
        num_users=raw.num_users,
        num_items=raw.num_items,
        train_graphs=train_graphs,
        test_pairs=as_pairs(test),
        validation_pairs=as_pairs(validation),
        user_ids=raw.user_ids,
        item_ids=raw.item_ids,
        split_seed=seed,
    )


@dataclass(frozen=True)
class SyntheticTruth:
    user_clusters: np.ndarray
    item_clusters: np.ndarray
    noise_edges: np.ndarray  # (K, 2) injected random view edges
    direct_buy_edges: np.ndarray  # buys drawn directly, not via the cart path


def _write_edge_file(path: str, edges: np.ndarray, user_width: int, item_width: int) -> None:
    lines = [f"u{u:0{user_width}d}\tv{v:0{item_width}d}\n" for u, v in edges]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.writelines(lines)


def generate_synthetic(
    num_users: int,
    num_items: int,
    num_clusters: int,
    noise_rate: float,
    seed: int,
    out_dir: str,
) -> tuple[str, SyntheticTruth]:
    """Write a clustered three-behavior dataset (view, cart, buy) plus manifest
    and a truth sidecar listing the injected noise view edges.

    Users and items get latent clusters (index mod num_clusters). Views are
    dense within-cluster and sparse across; carts keep a fraction of the
    within-cluster views; buys keep a fraction of the carts plus one direct
    within-cluster draw per user. Tokens are zero-padded so lexicographic ID
    remapping preserves index order. Same seed, byte-identical files.
    """
    if num_clusters < 2:
        raise DataError("num_clusters must be at least 2")
    if not 0.0 <= noise_rate < 1.0:
        raise DataError("noise_rate must lie in [0, 1)")
    if num_users < num_clusters or num_items < num_clusters:
        raise DataError("need at least one user and one item per cluster")

    rng = np.random.default_rng(seed)
    user_clusters = np.arange(num_users, dtype=np.int64) % num_clusters
    item_clusters = np.arange(num_items, dtype=np.int64) % num_clusters
    same = user_clusters[:, None] == item_clusters[None, :]

    view = rng.random((num_users, num_items)) < np.where(same, VIEW_P_WITHIN, VIEW_P_ACROSS)
    cart = view & same & (rng.random((num_users, num_items)) < CART_KEEP)
    buy = cart & (rng.random((num_users, num_items)) < BUY_FROM_CART_KEEP)

    direct = np.zeros_like(buy)
    for u in range(num_users):
        cluster_items = np.flatnonzero(item_clusters == user_clusters[u])
        pick = int(rng.choice(cluster_items))
        direct[u, pick] = True
    direct &= ~buy
    buy |= direct

    view_edges = np.argwhere(view).astype(np.int64)
    num_noise = math.floor(noise_rate * view_edges.shape[0])
    noise = []
    taken = view.copy()
    while len(noise) < num_noise:
        u = int(rng.integers(num_users))
        v = int(rng.integers(num_items))
        if not taken[u, v]:
            taken[u, v] = True
            noise.append((u, v))
    noise_edges = np.array(sorted(noise), dtype=np.int64).reshape(-1, 2)
    view_all = np.argwhere(taken).astype(np.int64)

    os.makedirs(out_dir, exist_ok=True)
    user_width = len(str(max(num_users - 1, 1)))
    item_width = len(str(max(num_items - 1, 1)))
    files = {"view": "view.tsv", "cart": "cart.tsv", "buy": "buy.tsv"}
    _write_edge_file(os.path.join(out_dir, files["view"]), view_all, user_width, item_width)
    _write_edge_file(os.path.join(out_dir, files["cart"]), np.argwhere(cart).astype(np.int64), user_width, item_width)
    _write_edge_file(os.path.join(out_dir, files["buy"]), np.argwhere(buy).astype(np.int64), user_width, item_width)

    manifest_doc = {
        "behaviors": ["view", "cart", "buy"],
        "target": "buy",
        "files": files,
        "num_users": num_users,
        "num_items": num_items,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8", newline="") as fh:
        json.dump(manifest_doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "noise.json"), "w", encoding="utf-8", newline="") as fh:
        json.dump([[int(u), int(v)] for u, v in noise_edges], fh)
        fh.write("\n")

    truth = SyntheticTruth(
        user_clusters=user_clusters,
        item_clusters=item_clusters,
        noise_edges=noise_edges,
        direct_buy_edges=np.argwhere(direct).astype(np.int64),
    )
    return manifest_path, truth
