"""Incremental false-positive repair on an extracted rule set.

False positives inside unlabeled leaves are patched with new boundary rules;
false positives inside anomalous leaves are carved out with exclusion boxes.
Updates only ever append clauses, so every other leaf stays untouched.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dbe import DbeParams, Hypercube, estimate_boundary
from .model_core import SourceModel
from .rules import (BENIGN_EXTENSION, EXCLUSION_PATCH, PRIORITY, Clause, RuleSet,
                    RuleSetParseError, classify_batch, clause_from_doc, clause_to_doc, conjoin,
                    with_clauses, _ClauseDoc)
from .sct import ANOMALOUS, path_rule

log = logging.getLogger(__name__)

ABOVE = 0b01
BELOW = 0b10
WITHIN = 0b00

# floor on patch hypercube widths, as a fraction of the training range
PATCH_MIN_WIDTH = 0.01

DELTA_FORMAT = "flowrules-delta"
DELTA_VERSION = 1


class DeltaMismatch(ValueError):
    pass


def violation_bitmap(x, clause: Clause) -> tuple[int, ...]:
    """Per-dimension 2-bit code: 01 above the upper bound, 10 below the lower one."""
    x = np.asarray(x, dtype=float)
    bits = [WITHIN] * len(x)
    for dim, iv in clause.bounds:
        if x[dim] > iv.hi:
            bits[dim] = ABOVE
        elif x[dim] < iv.lo or (iv.lo_open and x[dim] == iv.lo):
            bits[dim] = BELOW
    return tuple(bits)


def bitmap_str(bits: tuple[int, ...]) -> str:
    return "".join(f"{b:02b}" for b in bits)


@dataclass(frozen=True)
class RuleDelta:
    base_digest: str
    added: tuple[Clause, ...] = ()
    removed: tuple[int, ...] = ()
    affected_leaves: tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return len(self.added) + len(self.removed)

    def merge(self, other: "RuleDelta") -> "RuleDelta":
        return RuleDelta(self.base_digest, self.added + other.added, self.removed + other.removed,
                         tuple(sorted(set(self.affected_leaves) | set(other.affected_leaves))))


def apply_delta(old: RuleSet, delta: RuleDelta) -> RuleSet:
    if delta.base_digest != old.digest():
        raise DeltaMismatch("delta was produced against a different rule set")
    gone = set(delta.removed)
    unknown = gone - {c.id for c in old.clauses}
    if unknown:
        raise DeltaMismatch(f"delta removes unknown clauses {sorted(unknown)}")
    return with_clauses(old, [c for c in old.clauses if c.id not in gone] + list(delta.added))


def _leaf_clause(rs: RuleSet, leaf: int) -> Clause | None:
    """Outermost benign clause of an unlabeled leaf, used as the bitmap reference."""
    own = [c for c in rs.clauses if c.leaf == leaf and c.benign and c.role != EXCLUSION_PATCH]
    ext = [c for c in own if c.role == BENIGN_EXTENSION]
    return (ext or own or [None])[0]


def _open_fps(rs: RuleSet, fps: np.ndarray) -> np.ndarray:
    benign, _ = classify_batch(rs, fps)
    if benign.any():
        log.info("%d samples already classify benign; ignored", int(benign.sum()))
    return fps[~benign]


def patch(ruleset: RuleSet, fps, model: SourceModel, threshold: float,
          dbe_params: DbeParams = DbeParams()) -> tuple[RuleSet, RuleDelta]:
    """Append patch clauses for false positives in unlabeled leaves.

    Samples sharing a leaf and a violation bitmap form one group.  Each group
    gets a hypercube over all its members plus a boundary-estimated extension.
    False positives landing in anomalous leaves are handed to ``exclude``.
    """
    fps = _open_fps(ruleset, np.atleast_2d(np.asarray(fps, dtype=float)))
    if len(fps) == 0:
        return ruleset, RuleDelta(ruleset.digest())
    leaves = ruleset.leaf_of(fps)
    to_exclude = np.array([ruleset.leaf_label(int(lf)) == ANOMALOUS for lf in leaves])

    groups: dict[tuple[int, tuple[int, ...]], list[int]] = defaultdict(list)
    for row in np.nonzero(~to_exclude)[0]:
        leaf = int(leaves[row])
        ref = _leaf_clause(ruleset, leaf)
        bits = violation_bitmap(fps[row], ref) if ref is not None else (WITHIN,) * ruleset.dim
        groups[(leaf, bits)].append(int(row))

    min_width = None
    if ruleset.feature_range is not None:
        span = np.asarray(ruleset.feature_range[1]) - np.asarray(ruleset.feature_range[0])
        min_width = PATCH_MIN_WIDTH * span
    scale = 1.0
    if ruleset.tree is not None:
        scale = (ruleset.tree.norm.hi - ruleset.tree.norm.lo) or 1.0
    added: list[Clause] = []
    next_id = ruleset.next_id()
    for (leaf, bits), rows in sorted(groups.items()):
        members = fps[rows]
        H = Hypercube(members.min(axis=0), members.max(axis=0))
        br = estimate_boundary(H, model, threshold, dbe_params, score_scale=scale, salt=next_id,
                                min_width=min_width)
        path = path_rule(ruleset.tree, leaf).as_dict()
        for box in (H.intervals(), br.extension):
            added.append(Clause(next_id, BENIGN_EXTENSION, leaf, PRIORITY[BENIGN_EXTENSION],
                                conjoin(path, box)))
            next_id += 1
    delta = RuleDelta(ruleset.digest(), tuple(added), (), tuple(sorted({k[0] for k in groups})))
    patched = apply_delta(ruleset, delta)

    if to_exclude.any():
        _, ex_delta = exclude(patched, fps[to_exclude])
        delta = RuleDelta(ruleset.digest(), delta.added + ex_delta.added, (),
                          tuple(sorted(set(delta.affected_leaves) | set(ex_delta.affected_leaves))))
        patched = apply_delta(ruleset, delta)
    return patched, delta


def exclude(ruleset: RuleSet, fps, margin: float = 0.01) -> tuple[RuleSet, RuleDelta]:
    """Carve a benign box around false positives in each leaf, clipped to the leaf.

    The box is the samples' bounding box widened by ``margin`` times the
    training range of each feature.
    """
    fps = _open_fps(ruleset, np.atleast_2d(np.asarray(fps, dtype=float)))
    if len(fps) == 0:
        return ruleset, RuleDelta(ruleset.digest())
    if ruleset.feature_range is not None:
        span = np.asarray(ruleset.feature_range[1]) - np.asarray(ruleset.feature_range[0])
    else:
        span = fps.max(axis=0) - fps.min(axis=0)
    pad = margin * np.where(span > 0, span, 1.0)
    leaves = ruleset.leaf_of(fps)

    added = []
    next_id = ruleset.next_id()
    for leaf in sorted(set(int(v) for v in leaves)):
        members = fps[leaves == leaf]
        box = Hypercube(members.min(axis=0) - pad, members.max(axis=0) + pad)
        path = path_rule(ruleset.tree, leaf).as_dict()
        added.append(Clause(next_id, EXCLUSION_PATCH, leaf, PRIORITY[EXCLUSION_PATCH],
                            conjoin(path, box.intervals())))
        next_id += 1
    delta = RuleDelta(ruleset.digest(), tuple(added), (), tuple(sorted(set(int(v) for v in leaves))))
    return apply_delta(ruleset, delta), delta


def debug(ruleset: RuleSet, fps, model: SourceModel, threshold: float,
          dbe_params: DbeParams = DbeParams()) -> tuple[RuleSet, RuleDelta]:
    """Route each false positive to patching or excluding mode."""
    return patch(ruleset, fps, model, threshold, dbe_params)


def affected_anomalous_leaves(ruleset: RuleSet, delta: RuleDelta) -> int:
    return sum(1 for lf in delta.affected_leaves if ruleset.leaf_label(lf) == ANOMALOUS)


def delta_to_doc(delta: RuleDelta) -> dict:
    return {
        "format": DELTA_FORMAT,
        "version": DELTA_VERSION,
        "base_digest": delta.base_digest,
        "added": [clause_to_doc(c) for c in delta.added],
        "removed": list(delta.removed),
        "affected_leaves": list(delta.affected_leaves),
    }


def delta_from_doc(doc: dict) -> RuleDelta:
    if doc.get("format") != DELTA_FORMAT or doc.get("version") != DELTA_VERSION:
        raise RuleSetParseError("not a flowrules delta file (format/version)")
    try:
        added = tuple(clause_from_doc(_ClauseDoc.model_validate(c)) for c in doc["added"])
    except Exception as exc:
        raise RuleSetParseError(f"bad clause in delta: {exc}") from exc
    return RuleDelta(doc["base_digest"], added, tuple(int(v) for v in doc["removed"]),
                     tuple(int(v) for v in doc["affected_leaves"]))


def save_delta(delta: RuleDelta, path) -> None:
    Path(path).write_text(json.dumps(delta_to_doc(delta), indent=1) + "\n")


def load_delta(path) -> RuleDelta:
    return delta_from_doc(json.loads(Path(path).read_text()))
