"""Turn an anomaly detector into prioritised match-action rules."""

from .debugger import exclude, patch
from .model_core import calibrate_threshold, load_model, save_model, train_gmm, train_iforest
from .rules import RuleSet, classify, classify_batch, extract_rules, load_ruleset, save_ruleset
from .table_compiler import compile_ruleset, load_program, match_table, save_program

__all__ = [
    "RuleSet", "calibrate_threshold", "classify", "classify_batch", "compile_ruleset", "exclude",
    "extract_rules", "load_model", "load_program", "load_ruleset", "match_table", "patch",
    "save_model", "save_program", "save_ruleset", "train_gmm", "train_iforest",
]
