"""Evaluation metrics and synthetic workloads."""

from .metrics import EvalReport, fidelity, robustness, tpr_tnr
from .synth import SyntheticSpec, gen_synthetic

__all__ = ["EvalReport", "SyntheticSpec", "fidelity", "gen_synthetic", "robustness", "tpr_tnr"]
