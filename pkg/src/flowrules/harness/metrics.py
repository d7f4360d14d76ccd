"""Agreement and detection metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..model_core import SourceModel
from ..rules import RuleSet, classify_batch


def agreement_count(ruleset: RuleSet, model: SourceModel, threshold: float, X) -> tuple[int, int]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    rule_benign, _ = classify_batch(ruleset, X)
    model_benign = model.score_batch(X) >= threshold
    return int(np.count_nonzero(rule_benign == model_benign)), len(X)


def fidelity(ruleset: RuleSet, model: SourceModel, threshold: float, X) -> float:
    """Share of samples on which the rules and the model give the same verdict."""
    agree, n = agreement_count(ruleset, model, threshold, X)
    if n == 0:
        raise ValueError("fidelity needs at least one sample")
    return 1.0 - (n - agree) / n


def robustness(ruleset: RuleSet, model: SourceModel, threshold: float, X,
               sigma_frac: float = 0.01, seed: int = 0, span=None) -> float:
    """Fidelity on Gaussian-perturbed copies of ``X``.

    The per-feature noise std is ``sigma_frac`` times the training range
    (taken from the rule set when recorded, else from ``X``).
    """
    if sigma_frac < 0:
        raise ValueError("sigma_frac must be >= 0")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if span is None:
        if ruleset.feature_range is not None:
            span = np.asarray(ruleset.feature_range[1]) - np.asarray(ruleset.feature_range[0])
        else:
            span = X.max(axis=0) - X.min(axis=0)
    noise = np.random.default_rng(seed).standard_normal(X.shape) * (sigma_frac * np.asarray(span))
    return fidelity(ruleset, model, threshold, X + noise)


def tpr_tnr(flagged, is_attack) -> tuple[float | None, float | None]:
    """Detection rates with attacks as positives; None when a class is absent."""
    flagged = np.asarray(flagged, dtype=bool)
    is_attack = np.asarray(is_attack, dtype=bool)
    if flagged.shape != is_attack.shape:
        raise ValueError("verdicts and labels differ in length")
    n_att = int(is_attack.sum())
    n_ben = len(is_attack) - n_att
    tpr = int((flagged & is_attack).sum()) / n_att if n_att else None
    tnr = int((~flagged & ~is_attack).sum()) / n_ben if n_ben else None
    return tpr, tnr


@dataclass
class EvalReport:
    fidelity: float | None = None
    robustness: float | None = None
    tpr: float | None = None
    tnr: float | None = None
    n_clauses: int = 0
    n_entries: int | None = None
    delta_sizes: list[int] = field(default_factory=list)
    nfr_curve: list[float] = field(default_factory=list)

    def __post_init__(self):
        for name in ("fidelity", "robustness", "tpr", "tnr"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")
        if self.n_clauses < 0 or (self.n_entries or 0) < 0 or any(s < 0 for s in self.delta_sizes):
            raise ValueError("counts must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)
