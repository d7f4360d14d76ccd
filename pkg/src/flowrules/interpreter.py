"""Per-decision feature importance read directly off the matched rule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model_core import SourceModel
from .rules import ANOMALY, BENIGN, NO_MATCH, Clause, RuleSet, classify_batch

MIN_WIDTH = 1e-6


@dataclass(frozen=True, eq=False)
class Normalizer:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if (self.hi < self.lo).any():
            raise ValueError("normalizer max below min")

    @classmethod
    def fit(cls, X) -> "Normalizer":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return cls(X.min(axis=0), X.max(axis=0))

    @classmethod
    def from_ruleset(cls, rs: RuleSet) -> "Normalizer":
        if rs.feature_range is None:
            raise ValueError("rule set has no recorded feature range")
        return cls(*rs.feature_range)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def scale(self) -> np.ndarray:
        w = self.hi - self.lo
        return np.where(w > 0, w, 1.0)

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.lo) / self.scale

    def value(self, v: float, dim: int) -> float:
        if math.isinf(v):
            return v
        return (v - self.lo[dim]) / self.scale[dim]


@dataclass(frozen=True, eq=False)
class ImportanceVector:
    weights: np.ndarray
    decision: str
    clause_id: int
    # clause the weights were measured against (differs from clause_id for anomalies)
    reference_id: int


def _normalized_bounds(clause: Clause, norm: Normalizer):
    for dim, iv in clause.bounds:
        yield dim, norm.value(iv.lo, dim), norm.value(iv.hi, dim)


def _linf_distance(xn: np.ndarray, clause: Clause, norm: Normalizer) -> float:
    dist = 0.0
    for dim, lo, hi in _normalized_bounds(clause, norm):
        dist = max(dist, xn[dim] - hi, lo - xn[dim])
    return dist


def nearest_benign(ruleset: RuleSet, xn: np.ndarray, norm: Normalizer) -> Clause | None:
    best, best_d = None, math.inf
    for clause in ruleset.ordered():
        if clause.benign:
            dist = _linf_distance(xn, clause, norm)
            if dist < best_d:
                best, best_d = clause, dist
    return best


def interpret(x, decision: str, clause_id: int, ruleset: RuleSet, norm: Normalizer) -> ImportanceVector:
    """Importance of every feature for one classification.

    Benign decisions weight each constrained feature by the reciprocal of its
    normalised range width.  Anomalous decisions weight each feature by how far
    it overshoots the bounds of the closest benign clause.
    """
    x = np.asarray(x, dtype=float)
    if norm.dim != ruleset.dim or len(x) != ruleset.dim:
        raise ValueError("normalizer, rule set and sample dimensions differ")
    xn = norm.transform(x)
    weights = np.zeros(ruleset.dim)

    if decision == BENIGN:
        ref = ruleset.by_id(clause_id)
        for dim, lo, hi in _normalized_bounds(ref, norm):
            if math.isinf(lo):
                lo = min(0.0, hi)
            if math.isinf(hi):
                hi = max(1.0, lo)
            weights[dim] = 1.0 / max(hi - lo, MIN_WIDTH)
        return ImportanceVector(weights, decision, clause_id, ref.id)

    if decision != ANOMALY:
        raise ValueError(f"unknown decision {decision!r}")
    ref = nearest_benign(ruleset, xn, norm)
    if ref is None:
        return ImportanceVector(weights, decision, clause_id, NO_MATCH)
    for dim, lo, hi in _normalized_bounds(ref, norm):
        weights[dim] = max(xn[dim] - hi, 0.0) + max(lo - xn[dim], 0.0)
    return ImportanceVector(weights, decision, clause_id, ref.id)


def rank_features(importance) -> list[int]:
    """Every dimension, heaviest first; ties go to the lower dimension."""
    w = importance.weights if isinstance(importance, ImportanceVector) else np.asarray(importance)
    return sorted(range(len(w)), key=lambda i: (-w[i], i))


def top_k(importance, k: int) -> list[tuple[int, float]]:
    """Largest ``k`` non-zero weights; ties go to the lower dimension."""
    if k < 1:
        raise ValueError("k must be >= 1")
    w = importance.weights if isinstance(importance, ImportanceVector) else np.asarray(importance)
    return [(i, float(w[i])) for i in rank_features(w) if w[i] > 0][:k]


def explain_batch(ruleset: RuleSet, X, norm: Normalizer) -> list[ImportanceVector]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    benign, ids = classify_batch(ruleset, X)
    return [interpret(x, BENIGN if b else ANOMALY, int(cid), ruleset, norm)
            for x, b, cid in zip(X, benign, ids)]


def nullify(X, dims_per_row, policy: str = "zero", fill=None) -> np.ndarray:
    X = np.array(X, dtype=float)
    if policy == "zero":
        fill = np.zeros(X.shape[1])
    elif policy == "mean":
        if fill is None:
            raise ValueError("mean nullification needs the training mean")
        fill = np.asarray(fill, dtype=float)
    else:
        raise ValueError(f"unknown nullify policy {policy!r}")
    for row, dims in zip(X, dims_per_row):
        dims = list(dims)
        row[dims] = fill[dims]
    return X


def nfr(model: SourceModel, threshold: float, ruleset: RuleSet, norm: Normalizer, samples,
        k: int, policy: str = "zero", fill=None, selector: str = "top", seed: int = 0) -> float:
    """Share of model-normal samples that turn anomalous once ``k`` features are nullified.

    ``selector="top"`` nullifies the first k features of the interpreter's
    ranking (zero-weight features fill up in dimension order),
    ``selector="random"`` nullifies k uniformly chosen features.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    X = X[model.score_batch(X) >= threshold]
    if len(X) == 0 or k == 0:
        return 0.0
    if selector == "top":
        dims = [rank_features(iv)[:k] for iv in explain_batch(ruleset, X, norm)]
    elif selector == "random":
        rng = np.random.default_rng(seed)
        dims = [rng.choice(X.shape[1], size=min(k, X.shape[1]), replace=False) for _ in X]
    else:
        raise ValueError(f"unknown selector {selector!r}")
    flipped = model.score_batch(nullify(X, dims, policy, fill)) < threshold
    return float(flipped.mean())
