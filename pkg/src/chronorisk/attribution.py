"""Exact Shapley attribution for the forest's path-dependent value function.

The coalition value v(S) routes x through every tree: at a split on an
in-coalition feature it follows x's branch, otherwise it descends both
children weighted by their training cover. shap_values computes the exact
Shapley values of that game in polynomial time by decomposing each tree
over its leaves; shapley_bruteforce enumerates coalitions outright and is
the test oracle for the same game.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cohort import Dataset
from .errors import AttributionError, ModelCorruptionError, OracleScopeError
from .forest import FlatTree, Forest, TreeNode, predict_proba, _check_vector

IMPORTANCE_SAMPLE_CAP = 2000
BRUTEFORCE_FEATURE_LIMIT = 15


@dataclass
class Attribution:
    """Per-feature Shapley values; base + sum(contributions) = prediction."""

    base_value: float
    contributions: np.ndarray
    prediction: float


@dataclass
class ImportanceMap:
    """Non-negative per-feature importances normalized to sum 1."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if (self.values < 0).any():
            raise AttributionError("importances must be non-negative")
        if abs(float(self.values.sum()) - 1.0) > 1e-9:
            raise AttributionError("importances must sum to 1")

    def __getitem__(self, i: int) -> float:
        return float(self.values[i])

    def as_dict(self, schema) -> dict[str, float]:
        return {spec.name: float(v) for spec, v in zip(schema, self.values)}


@dataclass
class _LeafPaths:
    """Per-leaf path summaries of one tree, shared by all instances.

    For each leaf: the distinct features on its path, the (lo, hi] interval
    the path constrains each one to, and the product of cover fractions of
    that feature's splits (its weight when marginalized out).
    """

    feats: list[np.ndarray]
    lo: list[np.ndarray]
    hi: list[np.ndarray]
    z: list[np.ndarray]
    value: np.ndarray
    base: float


def _leaf_paths(flat: FlatTree) -> _LeafPaths:
    cached = getattr(flat, "_leaf_paths", None)
    if cached is not None:
        return cached
    feats, los, his, zs, values = [], [], [], [], []
    base = 0.0

    def walk(node: int, constraints: dict[int, tuple[float, float, float]]):
        nonlocal base
        f = int(flat.feature[node])
        if f < 0:
            keys = sorted(constraints)
            feats.append(np.array(keys, dtype=np.int64))
            los.append(np.array([constraints[k][0] for k in keys]))
            his.append(np.array([constraints[k][1] for k in keys]))
            zs.append(np.array([constraints[k][2] for k in keys]))
            values.append(float(flat.value[node]))
            weight = 1.0
            for k in keys:
                weight *= constraints[k][2]
            base += weight * float(flat.value[node])
            return
        t = float(flat.threshold[node])
        cover = flat.cover[node]
        if cover <= 0:
            raise ModelCorruptionError("zero-cover node encountered")
        lo, hi, z = constraints.get(f, (-np.inf, np.inf, 1.0))
        for child, new_lo, new_hi in (
            (int(flat.left[node]), lo, min(hi, t)),
            (int(flat.right[node]), max(lo, t), hi),
        ):
            frac = float(flat.cover[child]) / float(cover)
            if frac <= 0:
                raise ModelCorruptionError("zero-cover node encountered")
            child_constraints = dict(constraints)
            child_constraints[f] = (new_lo, new_hi, z * frac)
            walk(child, child_constraints)

    walk(0, {})
    result = _LeafPaths(feats, los, his, zs, np.array(values), base)
    flat._leaf_paths = result
    return result


def _shapley_weights(p: int) -> np.ndarray:
    """w[k] = k! (p-1-k)! / p! for k = 0..p-1."""
    fact = [math.factorial(i) for i in range(p + 1)]
    return np.array([fact[k] * fact[p - 1 - k] / fact[p] for k in range(p)])


_WEIGHTS: dict[int, np.ndarray] = {}


def _weights(p: int) -> np.ndarray:
    if p not in _WEIGHTS:
        _WEIGHTS[p] = _shapley_weights(p)
    return _WEIGHTS[p]


def _tree_shap_batch(flat: FlatTree, x: np.ndarray, phi: np.ndarray) -> float:
    """Add one tree's Shapley values for every row of x into phi; return
    the tree's base value."""
    paths = _leaf_paths(flat)
    n = x.shape[0]
    for feats, lo, hi, z, value in zip(
        paths.feats, paths.lo, paths.hi, paths.z, paths.value
    ):
        p = len(feats)
        if p == 0:
            continue
        cols = x[:, feats]
        o = ((cols > lo) & (cols <= hi)).astype(np.float64)
        if p == 1:
            phi[:, feats[0]] += (o[:, 0] - z[0]) * value
            continue
        # Extend the path polynomial: c[k] = sum over k-subsets of the
        # product of o for chosen features and z for the rest.
        c = np.zeros((n, p + 1))
        c[:, 0] = 1.0
        for j in range(p):
            for k in range(j + 1, 0, -1):
                c[:, k] = c[:, k - 1] * o[:, j] + c[:, k] * z[j]
            c[:, 0] *= z[j]
        w = _weights(p)
        a = np.zeros((n, p))
        for j in range(p):
            # Unwind feature j from the polynomial; two branches because the
            # o=1 and o=0 recurrences differ.
            zj = z[j]
            oj = o[:, j]
            a[:, p - 1] = c[:, p]
            for k in range(p - 1, 0, -1):
                a[:, k - 1] = c[:, k] - zj * a[:, k]
            b = c[:, :p] / zj
            cwo = np.where(oj[:, None] == 1.0, a, b)
            phi[:, feats[j]] += (oj - zj) * (cwo @ w) * value
    return paths.base


def shap_values_batch(forest: Forest, x: np.ndarray) -> tuple[float, np.ndarray]:
    """(base_value, per-row per-feature Shapley matrix) for many rows."""
    x = np.asarray(x, dtype=np.float64)
    phi = np.zeros((x.shape[0], len(forest.schema)))
    base = 0.0
    for flat in forest.flat():
        base += _tree_shap_batch(flat, x, phi)
    return base / forest.n_trees, phi / forest.n_trees


def shap_values(forest: Forest, x) -> Attribution:
    """Exact per-feature Shapley attribution of one prediction."""
    row = _check_vector(forest, x)
    base, phi = shap_values_batch(forest, row.reshape(1, -1))
    return Attribution(base, phi[0], predict_proba(forest, x))


# --- Brute-force oracle -------------------------------------------------------

def _tree_active_features(node: TreeNode, out: set[int]) -> set[int]:
    if not node.is_leaf:
        out.add(node.feature_index)
        _tree_active_features(node.left, out)
        _tree_active_features(node.right, out)
    return out


def active_features(forest: Forest) -> set[int]:
    out: set[int] = set()
    for tree in forest.trees:
        _tree_active_features(tree, out)
    return out


def _descend(node: TreeNode, x, coalition: frozenset) -> float:
    if node.is_leaf:
        return node.value
    if node.cover <= 0 or node.left.cover <= 0 or node.right.cover <= 0:
        raise ModelCorruptionError("zero-cover node encountered")
    f = node.feature_index
    if f in coalition:
        child = node.left if x[f] <= node.threshold else node.right
        return _descend(child, x, coalition)
    return (
        node.left.cover * _descend(node.left, x, coalition)
        + node.right.cover * _descend(node.right, x, coalition)
    ) / node.cover


def shapley_bruteforce(forest: Forest, x) -> Attribution:
    """Shapley values by full coalition enumeration (tests only).

    Enumerates subsets per tree over that tree's own split features —
    features absent from a tree are null players there — and averages the
    per-tree results, which is the forest game by linearity.
    """
    row = _check_vector(forest, x)
    union = active_features(forest)
    if len(union) > BRUTEFORCE_FEATURE_LIMIT:
        raise OracleScopeError(
            f"{len(union)} active features exceed the brute-force "
            f"limit of {BRUTEFORCE_FEATURE_LIMIT}"
        )
    phi = np.zeros(len(forest.schema))
    base = 0.0
    for tree in forest.trees:
        feats = sorted(_tree_active_features(tree, set()))
        a = len(feats)
        values = {}
        for mask in range(1 << a):
            coalition = frozenset(feats[i] for i in range(a) if mask >> i & 1)
            values[mask] = _descend(tree, row, coalition)
        base += values[0]
        if a == 0:
            continue
        fact = [math.factorial(i) for i in range(a + 1)]
        weights = [fact[s] * fact[a - s - 1] / fact[a] for s in range(a)]
        for i in range(a):
            bit = 1 << i
            total = 0.0
            for mask in range(1 << a):
                if mask & bit:
                    continue
                s = bin(mask).count("1")
                total += weights[s] * (values[mask | bit] - values[mask])
            phi[feats[i]] += total
    return Attribution(
        base / forest.n_trees, phi / forest.n_trees, predict_proba(forest, x)
    )


# --- Global importance and per-instance risk factors -------------------------

def global_importance(
    forest: Forest,
    reference: Dataset,
    sample_cap: int = IMPORTANCE_SAMPLE_CAP,
    seed: int = 0,
) -> ImportanceMap:
    """Mean |Shapley value| per feature over a capped reference sample,
    normalized to sum 1."""
    if len(reference) == 0:
        raise AttributionError("reference dataset is empty")
    x, _ = reference.arrays()
    if len(x) > sample_cap:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(x), size=sample_cap, replace=False))
        x = x[keep]
    _, phi = shap_values_batch(forest, x)
    raw = np.abs(phi).mean(axis=0)
    total = float(raw.sum())
    if total <= 0:
        raise AttributionError(
            "all attributions are zero; the forest never splits"
        )
    return ImportanceMap(raw / total)


@dataclass
class RankedFeature:
    index: int
    contribution: float
    share: float
    direction: str  # "increasing" | "decreasing"


def risk_factors(
    attribution: Attribution, importances: ImportanceMap, top_k: int
) -> tuple[list[RankedFeature], list[RankedFeature]]:
    """(important_features, risk_increasing_features) for the Fig.-3-style
    pie and bar views: top_k by |contribution|, then the positive subset."""
    if top_k < 1:
        raise AttributionError("top_k must be >= 1")
    phi = attribution.contributions
    order = sorted(
        range(len(phi)),
        key=lambda i: (-abs(phi[i]), -importances[i], i),
    )
    selected = [i for i in order[:top_k] if abs(phi[i]) > 0]
    total = sum(abs(phi[i]) for i in selected)
    important = [
        RankedFeature(
            index=i,
            contribution=float(phi[i]),
            share=float(abs(phi[i]) / total),
            direction="increasing" if phi[i] > 0 else "decreasing",
        )
        for i in selected
    ]
    increasing = sorted(
        (f for f in important if f.contribution > 0),
        key=lambda f: (-f.contribution, f.index),
    )
    return important, increasing
