"""Explainability core: surrogate tree, rule extraction, explanation bundles.

Rule extraction walks every tree's decision path for the explained instance,
keeps only predicates on globally important features, widens them to the
[min, max] bounds observed in the leaf's training neighbourhood (plus the
instance itself), and re-quantifies each simplified rule against the whole
training set: support is the matching count, probability the fraction of
matches whose label agrees with the forest's prediction for the instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attribution import (
    Attribution,
    ImportanceMap,
    RankedFeature,
    risk_factors,
    shap_values,
)
from .errors import SurrogateError
from .forest import (
    Forest,
    ForestParams,
    TreeNode,
    branch_predicates,
    flatten_tree,
    grow_tree,
    leaf_for,
    predict_proba,
    predict_proba_batch,
    route_batch,
    _cardinalities,
    _check_vector,
)

SURROGATE_MAX_DEPTH = 10
IMPORTANCE_GATE_SURROGATE = 0.05
IMPORTANCE_GATE_RULES = 0.01
DEFAULT_TOP_K = 10


@dataclass(frozen=True)
class Predicate:
    """Inclusive bound on one feature: lower <= value <= upper."""

    feature_index: int
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"predicate bounds out of order: {self}")


@dataclass(frozen=True)
class ExtractedRule:
    predicates: tuple[Predicate, ...]  # sorted by feature_index, one per feature
    support: int
    probability: float
    source_tree: int


@dataclass
class Neighbourhood:
    indices: np.ndarray
    class_counts: tuple[int, int]


@dataclass(frozen=True)
class SurrogatePath:
    steps: tuple[tuple[int, str, float], ...]  # (feature_index, relation, threshold)
    leaf_fraction: float


@dataclass
class SurrogateModel:
    tree: TreeNode
    fidelity: float
    gated_features: tuple[int, ...]
    gate: float


@dataclass
class ExplanationBundle:
    """The four explanation views for one prediction."""

    prediction: float
    predicted_class: int
    important_features: list[RankedFeature]
    risk_increasing: list[RankedFeature]
    surrogate_path: SurrogatePath
    rules: list[ExtractedRule]


def _as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    x, y = data.arrays()
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def fit_surrogate(
    forest: Forest,
    train,
    importances: ImportanceMap,
    gate: float = IMPORTANCE_GATE_SURROGATE,
    max_depth: int = SURROGATE_MAX_DEPTH,
) -> SurrogateModel:
    """Shallow CART mimicking the forest's predicted classes on its
    training set, restricted to features at or above the importance gate."""
    x, _ = _as_xy(train)
    gated = tuple(i for i in range(len(forest.schema)) if importances[i] >= gate)
    if not gated:
        raise SurrogateError(
            f"no feature reaches the {gate:.0%} importance gate; "
            "lower the gate to fit a surrogate"
        )
    targets = (predict_proba_batch(forest, x) >= 0.5).astype(np.int8)
    params = ForestParams(
        n_trees=1,
        max_depth=max_depth,
        min_samples_leaf=1,
        bootstrap=False,
        seed=0,
    )
    tree = grow_tree(
        x.astype(np.int16), targets, _cardinalities(forest.schema), params, 0,
        allowed_features=np.array(gated),
    )
    flat = flatten_tree(tree)
    agree = (flat.value[route_batch(flat, x)] >= 0.5).astype(np.int8) == targets
    return SurrogateModel(tree, float(agree.mean()), gated, gate)


def surrogate_path(surrogate: TreeNode, x) -> SurrogatePath:
    """Root-to-leaf predicates for x plus the leaf's class-1 fraction."""
    leaf = leaf_for(surrogate, x)
    steps = tuple(branch_predicates(surrogate, leaf))
    return SurrogatePath(steps, float(leaf.value))


def apply_rule(predicates, data) -> Neighbourhood:
    """Examples satisfying lower <= value <= upper for every predicate."""
    x, y = _as_xy(data)
    mask = np.ones(len(x), dtype=bool)
    for pred in predicates:
        col = x[:, pred.feature_index]
        mask &= (col >= pred.lower) & (col <= pred.upper)
    idx = np.nonzero(mask)[0]
    pos = int(y[idx].sum())
    return Neighbourhood(idx, (len(idx) - pos, pos))


def is_duplicate(predicates, kept_rules) -> bool:
    """True iff an already-kept rule has the same features and bounds."""
    key = tuple(sorted((p.feature_index, p.lower, p.upper) for p in predicates))
    for rule in kept_rules:
        other = tuple(
            sorted((p.feature_index, p.lower, p.upper) for p in rule.predicates)
        )
        if key == other:
            return True
    return False


def extract_rules(
    x,
    importances: ImportanceMap,
    train,
    forest: Forest,
    gate: float = IMPORTANCE_GATE_RULES,
) -> list[ExtractedRule]:
    """Simplified, quantified decision rules for x, at most one per tree."""
    row = _check_vector(forest, x)
    xt, yt = _as_xy(train)
    predicted = int(predict_proba(forest, x) >= 0.5)
    kept: list[ExtractedRule] = []
    for ti, (tree, flat) in enumerate(zip(forest.trees, forest.flat())):
        leaf_idx = route_batch(flat, row.reshape(1, -1))[0]
        leaf = flat.nodes[leaf_idx]
        members = np.nonzero(route_batch(flat, xt) == leaf_idx)[0]
        branch = branch_predicates(tree, leaf)
        gated = sorted({f for f, _, _ in branch if importances[f] > gate})
        if not gated:
            continue
        predicates = []
        for f in gated:
            values = np.append(xt[members, f], row[f])
            predicates.append(Predicate(f, float(values.min()), float(values.max())))
        hood = apply_rule(predicates, train)
        support = len(hood.indices)
        if support == 0:
            continue
        probability = float((yt[hood.indices] == predicted).mean())
        if probability >= 0.5 and not is_duplicate(predicates, kept):
            kept.append(
                ExtractedRule(tuple(predicates), support, probability, ti)
            )
    return kept


def explain(
    x,
    forest: Forest,
    importances: ImportanceMap,
    surrogate: SurrogateModel,
    train,
    top_k: int = DEFAULT_TOP_K,
) -> ExplanationBundle:
    """Assemble all four explanation views for one instance."""
    prediction = predict_proba(forest, x)
    attribution = shap_values(forest, x)
    important, increasing = risk_factors(attribution, importances, top_k)
    path = surrogate_path(surrogate.tree, x)
    rules = extract_rules(x, importances, train, forest)
    rules.sort(key=lambda r: (-r.probability, -r.support, r.source_tree))
    return ExplanationBundle(
        prediction=prediction,
        predicted_class=int(prediction >= 0.5),
        important_features=important,
        risk_increasing=increasing,
        surrogate_path=path,
        rules=rules,
    )


# --- JSON form ---------------------------------------------------------------

def _fmt_bound(v: float) -> float | int:
    return int(v) if float(v).is_integer() else float(v)


def explanation_to_dict(bundle: ExplanationBundle, schema) -> dict:
    names = [s.name for s in schema]
    return {
        "prediction": bundle.prediction,
        "predicted_class": bundle.predicted_class,
        "important_features": [
            {
                "feature": names[f.index],
                "share": f.share,
                "direction": f.direction,
                "contribution": f.contribution,
            }
            for f in bundle.important_features
        ],
        "risk_factors": [
            {"feature": names[f.index], "contribution": f.contribution}
            for f in bundle.risk_increasing
        ],
        "surrogate_path": {
            "steps": [
                {"feature": names[f], "relation": rel, "threshold": thr}
                for f, rel, thr in bundle.surrogate_path.steps
            ],
            "leaf_fraction": bundle.surrogate_path.leaf_fraction,
        },
        "rules": [
            {
                "predicates": [
                    {
                        "feature": names[p.feature_index],
                        "lower": _fmt_bound(p.lower),
                        "upper": _fmt_bound(p.upper),
                    }
                    for p in rule.predicates
                ],
                "support": rule.support,
                "probability": rule.probability,
                "source_tree": rule.source_tree,
            }
            for rule in bundle.rules
        ],
    }
