"""From-scratch CART trees and bagged random forests over ordinal features.

Trees keep per-node cover counts and class counts so the attribution and
rule-extraction modules can reuse the training distribution without access
to the raw data. Induction is greedy Gini minimization with ties broken by
lowest feature index, then lowest threshold; thresholds sit at midpoints
between observed adjacent feature levels.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cohort import Dataset, FeatureVector, schema_from_dicts, schema_to_dicts
from .ehr import FeatureSpec
from .errors import (
    BundleError,
    InferenceError,
    ModelCorruptionError,
    TrainingError,
)

FOREST_FORMAT_VERSION = 1

_GAIN_EPS = 1e-12


@dataclass(eq=False)
class TreeNode:
    """Internal node (feature_index set) or leaf (value set).

    Node identity is object identity; two structurally equal leaves of one
    tree are still distinct routing targets.
    """

    cover: int
    class_counts: tuple[int, int]
    feature_index: int | None = None
    threshold: float | None = None
    left: TreeNode | None = None
    right: TreeNode | None = None
    value: float | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature_index is None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 25
    max_depth: int = 20
    min_samples_leaf: int = 5
    features_per_split: int | None = None  # None -> ceil(sqrt(M))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise TrainingError("forest parameters must be positive")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise TrainingError("features_per_split must be positive")

    def resolve_features_per_split(self, n_features: int) -> int:
        if self.features_per_split is None:
            return math.ceil(math.sqrt(n_features))
        if self.features_per_split > n_features:
            raise TrainingError(
                f"features_per_split {self.features_per_split} exceeds "
                f"feature count {n_features}"
            )
        return self.features_per_split


@dataclass
class Forest:
    trees: tuple[TreeNode, ...]
    schema: tuple[FeatureSpec, ...]
    params: ForestParams
    _flat_cache: list = field(default=None, repr=False, compare=False)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def max_depth(self) -> int:
        return self.params.max_depth

    def flat(self) -> list["FlatTree"]:
        if self._flat_cache is None:
            self._flat_cache = [flatten_tree(t) for t in self.trees]
        return self._flat_cache


def tree_seed(seed: int, index: int) -> int:
    """Stable per-tree sub-seed; independent of build order."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return int(ss.generate_state(1, np.uint64)[0])


def _bootstrap_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(index, 1))


def _leaf(y_counts: tuple[int, int]) -> TreeNode:
    cover = y_counts[0] + y_counts[1]
    return TreeNode(cover=cover, class_counts=y_counts, value=y_counts[1] / cover)


def _gini(n0: int, n1: int) -> float:
    n = n0 + n1
    if n == 0:
        return 0.0
    p1 = n1 / n
    return 2.0 * p1 * (1.0 - p1)


def _best_split(x_col: np.ndarray, y: np.ndarray, cardinality: int, min_leaf: int):
    """Best (weighted_impurity, threshold) for one feature, or None."""
    counts = np.bincount(x_col * 2 + y, minlength=2 * cardinality).reshape(
        cardinality, 2
    )
    csum = counts.cumsum(axis=0)
    total0, total1 = int(csum[-1, 0]), int(csum[-1, 1])
    n = total0 + total1
    observed = np.nonzero(counts.sum(axis=1))[0]
    best = None
    for i in range(len(observed) - 1):
        level = observed[i]
        nl0, nl1 = int(csum[level, 0]), int(csum[level, 1])
        nl = nl0 + nl1
        nr = n - nl
        if nl < min_leaf or nr < min_leaf:
            continue
        weighted = (nl * _gini(nl0, nl1) + nr * _gini(total0 - nl0, total1 - nl1)) / n
        threshold = (float(observed[i]) + float(observed[i + 1])) / 2.0
        if best is None or weighted < best[0]:
            best = (weighted, threshold)
    return best


def _grow(
    x: np.ndarray,
    y: np.ndarray,
    idx: np.ndarray,
    depth: int,
    cards: np.ndarray,
    allowed: np.ndarray,
    k: int,
    params: ForestParams,
    rng: np.random.Generator,
) -> TreeNode:
    ys = y[idx]
    n1 = int(ys.sum())
    counts = (len(idx) - n1, n1)
    if (
        depth >= params.max_depth
        or counts[0] == 0
        or counts[1] == 0
        or len(idx) < 2 * params.min_samples_leaf
    ):
        return _leaf(counts)
    if k < len(allowed):
        candidates = np.sort(rng.choice(allowed, size=k, replace=False))
    else:
        candidates = allowed
    parent = _gini(*counts)
    best = None  # (weighted, feature, threshold)
    for f in candidates:
        found = _best_split(x[idx, f], ys, int(cards[f]), params.min_samples_leaf)
        if found is None:
            continue
        weighted, threshold = found
        if best is None or weighted < best[0]:
            best = (weighted, int(f), threshold)
    if best is None or parent - best[0] <= _GAIN_EPS:
        return _leaf(counts)
    _, feature, threshold = best
    go_left = x[idx, feature] <= threshold
    left = _grow(x, y, idx[go_left], depth + 1, cards, allowed, k, params, rng)
    right = _grow(x, y, idx[~go_left], depth + 1, cards, allowed, k, params, rng)
    return TreeNode(
        cover=counts[0] + counts[1],
        class_counts=counts,
        feature_index=feature,
        threshold=threshold,
        left=left,
        right=right,
    )


def _cardinalities(schema: tuple[FeatureSpec, ...]) -> np.ndarray:
    return np.array([s.cardinality for s in schema], dtype=np.int64)


def grow_tree(
    x: np.ndarray,
    y: np.ndarray,
    cards: np.ndarray,
    params: ForestParams,
    rng_seed,
    allowed_features=None,
) -> TreeNode:
    """Array-level tree induction shared by fit_tree and the surrogate."""
    if len(x) == 0:
        raise TrainingError("cannot fit a tree on an empty dataset")
    if allowed_features is None:
        allowed = np.arange(x.shape[1])
        k = params.resolve_features_per_split(x.shape[1])
    else:
        allowed = np.asarray(sorted(allowed_features), dtype=np.int64)
        k = len(allowed)
    rng = np.random.default_rng(rng_seed)
    return _grow(
        np.asarray(x), np.asarray(y, dtype=np.int64), np.arange(len(y)), 0,
        cards, allowed, k, params, rng,
    )


def fit_tree(data: Dataset, params: ForestParams, rng_seed) -> TreeNode:
    """Grow a single CART tree; deterministic for a given rng_seed."""
    x, y = data.arrays()
    return grow_tree(x, y, _cardinalities(data.schema), params, rng_seed)


def fit_forest(data: Dataset, params: ForestParams) -> Forest:
    """Bag n_trees CART trees; per-tree sub-seeding keeps the result
    independent of build order."""
    if len(data) == 0:
        raise TrainingError("cannot fit a forest on an empty dataset")
    x, y = data.arrays()
    cards = _cardinalities(data.schema)
    allowed = np.arange(x.shape[1])
    k = params.resolve_features_per_split(x.shape[1])
    trees = []
    for i in range(params.n_trees):
        if params.bootstrap:
            boot_rng = np.random.default_rng(_bootstrap_seed(params.seed, i))
            idx = np.sort(boot_rng.integers(0, len(y), size=len(y)))
        else:
            idx = np.arange(len(y))
        rng = np.random.default_rng(tree_seed(params.seed, i))
        trees.append(
            _grow(x, y.astype(np.int64), idx, 0, cards, allowed, k, params, rng)
        )
    return Forest(tuple(trees), data.schema, params)


# --- Flat representation for vectorized inference ---------------------------

@dataclass
class FlatTree:
    """Array form of one tree: node 0 is the root, -1 marks leaves."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    cover: np.ndarray
    value: np.ndarray
    nodes: list  # flat index -> TreeNode

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


def flatten_tree(root: TreeNode) -> FlatTree:
    feature, threshold, left, right, cover, value = [], [], [], [], [], []
    order: list[TreeNode] = []

    def walk(node: TreeNode) -> int:
        i = len(order)
        order.append(node)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        cover.append(node.cover)
        value.append(0.0)
        if node.cover <= 0:
            raise ModelCorruptionError("node with non-positive cover")
        if node.is_leaf:
            value[i] = node.value
        else:
            feature[i] = node.feature_index
            threshold[i] = node.threshold
            left[i] = walk(node.left)
            right[i] = walk(node.right)
        return i

    walk(root)
    return FlatTree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        cover=np.array(cover, dtype=np.float64),
        value=np.array(value, dtype=np.float64),
        nodes=order,
    )


def _check_vector(forest: Forest, x) -> np.ndarray:
    values = x.values if isinstance(x, FeatureVector) else tuple(x)
    if len(values) != len(forest.schema):
        raise InferenceError(
            f"vector length {len(values)} does not match schema "
            f"length {len(forest.schema)}"
        )
    for v, spec in zip(values, forest.schema):
        if not 0 <= int(v) < spec.cardinality:
            raise InferenceError(f"value {v} out of range for feature {spec.name}")
    return np.asarray(values, dtype=np.float64)


def route_batch(flat: FlatTree, x: np.ndarray) -> np.ndarray:
    """Leaf index reached by every row of x."""
    n = x.shape[0]
    cur = np.zeros(n, dtype=np.int32)
    while True:
        f = flat.feature[cur]
        active = f >= 0
        if not active.any():
            return cur
        rows = np.nonzero(active)[0]
        vals = x[rows, f[rows]]
        go_left = vals <= flat.threshold[cur[rows]]
        cur[rows] = np.where(go_left, flat.left[cur[rows]], flat.right[cur[rows]])


def predict_proba_batch(forest: Forest, x: np.ndarray) -> np.ndarray:
    """Mean leaf value over trees for every row (soft voting)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(len(x))
    for flat in forest.flat():
        out += flat.value[route_batch(flat, x)]
    return out / forest.n_trees


def predict_proba(forest: Forest, x) -> float:
    """Probability of the positive class for one vector."""
    row = _check_vector(forest, x)
    return float(predict_proba_batch(forest, row.reshape(1, -1))[0])


def predict_class(forest: Forest, x) -> int:
    return int(predict_proba(forest, x) >= 0.5)


def leaf_for(tree: TreeNode, x) -> TreeNode:
    """The unique leaf reached by routing x (value <= threshold goes left)."""
    values = x.values if isinstance(x, FeatureVector) else tuple(x)
    node = tree
    while not node.is_leaf:
        if node.feature_index >= len(values):
            raise InferenceError(
                f"vector too short for split on feature {node.feature_index}"
            )
        node = node.left if values[node.feature_index] <= node.threshold else node.right
    return node


def branch_predicates(
    tree: TreeNode, leaf: TreeNode
) -> list[tuple[int, str, float]]:
    """Root-to-leaf split conditions as (feature_index, '<=' or '>', threshold)."""

    def search(node: TreeNode, path):
        if node is leaf:
            return path
        if node.is_leaf:
            return None
        found = search(node.left, path + [(node.feature_index, "<=", node.threshold)])
        if found is not None:
            return found
        return search(node.right, path + [(node.feature_index, ">", node.threshold)])

    path = search(tree, [])
    if path is None:
        raise ModelCorruptionError("leaf does not belong to this tree")
    return path


# --- Serialization -----------------------------------------------------------

def schema_hash(schema: tuple[FeatureSpec, ...]) -> str:
    canonical = json.dumps(schema_to_dicts(schema), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _node_to_dict(node: TreeNode) -> dict:
    if node.is_leaf:
        return {
            "cover": node.cover,
            "class_counts": list(node.class_counts),
            "value": node.value,
        }
    return {
        "cover": node.cover,
        "class_counts": list(node.class_counts),
        "feature": node.feature_index,
        "threshold": node.threshold,
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(doc: dict) -> TreeNode:
    counts = tuple(doc["class_counts"])
    if "feature" in doc:
        return TreeNode(
            cover=doc["cover"],
            class_counts=counts,
            feature_index=doc["feature"],
            threshold=doc["threshold"],
            left=_node_from_dict(doc["left"]),
            right=_node_from_dict(doc["right"]),
        )
    return TreeNode(cover=doc["cover"], class_counts=counts, value=doc["value"])


def params_to_dict(params: ForestParams) -> dict:
    return {
        "n_trees": params.n_trees,
        "max_depth": params.max_depth,
        "min_samples_leaf": params.min_samples_leaf,
        "features_per_split": params.features_per_split,
        "bootstrap": params.bootstrap,
        "seed": params.seed,
    }


def params_from_dict(doc: dict) -> ForestParams:
    return ForestParams(**doc)


def serialize(forest: Forest) -> dict:
    return {
        "format_version": FOREST_FORMAT_VERSION,
        "schema_hash": schema_hash(forest.schema),
        "params": params_to_dict(forest.params),
        "trees": [_node_to_dict(t) for t in forest.trees],
    }


def deserialize(doc: dict, schema: tuple[FeatureSpec, ...]) -> Forest:
    version = doc.get("format_version")
    if version != FOREST_FORMAT_VERSION:
        raise BundleError(
            f"unsupported forest format version {version}, "
            f"this build reads version {FOREST_FORMAT_VERSION}"
        )
    expected = schema_hash(schema)
    if doc.get("schema_hash") != expected:
        raise BundleError(
            f"schema hash mismatch: bundle carries {doc.get('schema_hash')}, "
            f"provided schema hashes to {expected}"
        )
    params = params_from_dict(doc["params"])
    trees = tuple(_node_from_dict(t) for t in doc["trees"])
    return Forest(trees, tuple(schema), params)
