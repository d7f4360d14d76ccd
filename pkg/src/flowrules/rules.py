"""Rule sets: clause semantics, extraction from a source model, and file format."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, StrictBool, StrictInt, ValidationError

from .dbe import DbeParams, NoNormalSample, estimate_boundary, minimal_hypercube
from .model_core import SourceModel
from .sct import (ANOMALOUS, UNLABELED, Interval, ScoreClusteringTree, ScoreNorm, SctNode,
                  SctParams, build_sct, path_rule)

log = logging.getLogger(__name__)

RULESET_FORMAT = "flowrules-ruleset"
RULESET_VERSION = 1

BENIGN_HYPERCUBE = "benign-hypercube"
BENIGN_EXTENSION = "benign-extension"
ANOMALOUS_PATH = "anomalous-path"
EXCLUSION_PATCH = "exclusion-patch"
ROLES = (BENIGN_HYPERCUBE, BENIGN_EXTENSION, ANOMALOUS_PATH, EXCLUSION_PATCH)

PRIORITY = {EXCLUSION_PATCH: 3, ANOMALOUS_PATH: 2, BENIGN_HYPERCUBE: 1, BENIGN_EXTENSION: 1}

BENIGN = "benign"
ANOMALY = "anomalous"
NO_MATCH = -1


def is_benign_role(role: str) -> bool:
    return role in (BENIGN_HYPERCUBE, BENIGN_EXTENSION, EXCLUSION_PATCH)


@dataclass(frozen=True)
class Clause:
    id: int
    role: str
    leaf: int
    priority: int
    bounds: tuple[tuple[int, Interval], ...]

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown clause role {self.role!r}")
        for dim, iv in self.bounds:
            if iv.empty:
                raise ValueError(f"clause {self.id} has an empty interval on dim {dim}")

    @property
    def benign(self) -> bool:
        return is_benign_role(self.role)

    def interval(self, dim: int) -> Interval | None:
        for d, iv in self.bounds:
            if d == dim:
                return iv
        return None

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ok = np.ones(len(X), dtype=bool)
        for dim, iv in self.bounds:
            ok &= iv.contains(X[:, dim])
        return ok


def conjoin(*parts) -> tuple[tuple[int, Interval], ...]:
    """Intersect dimension->Interval mappings (or per-dim sequences), dropping free dims."""
    merged: dict[int, Interval] = {}
    for part in parts:
        items = part.items() if isinstance(part, dict) else enumerate(part)
        for dim, iv in items:
            merged[dim] = merged[dim].intersect(iv) if dim in merged else iv
    return tuple(sorted((d, iv) for d, iv in merged.items() if not iv.unbounded))


@dataclass
class RuleSet:
    clauses: tuple[Clause, ...]
    dim: int
    feature_names: tuple[str, ...] = ()
    feature_range: tuple[tuple[float, ...], tuple[float, ...]] | None = None
    provenance: dict = field(default_factory=dict)
    tree: ScoreClusteringTree | None = None

    def __post_init__(self):
        self.clauses = tuple(self.clauses)
        if not self.feature_names:
            self.feature_names = tuple(f"f{i}" for i in range(self.dim))
        ids = [c.id for c in self.clauses]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate clause ids")

    def ordered(self) -> list[Clause]:
        """Clauses in evaluation order: priority descending, then file order."""
        pos = {c.id: k for k, c in enumerate(self.clauses)}
        return sorted(self.clauses, key=lambda c: (-c.priority, pos[c.id]))

    def by_id(self, cid: int) -> Clause:
        for c in self.clauses:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def leaf_of(self, X) -> np.ndarray:
        if self.tree is None:
            raise ValueError("rule set carries no tree")
        return self.tree.apply(X)

    def leaf_label(self, leaf: int) -> int:
        return self.tree.nodes[leaf].label

    def next_id(self) -> int:
        return max((c.id for c in self.clauses), default=-1) + 1

    def digest(self) -> str:
        return hashlib.sha256(serialize(self).encode()).hexdigest()


def classify_batch(ruleset: RuleSet, X) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised first-match evaluation: (benign mask, matched clause ids)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != ruleset.dim:
        raise ValueError(f"expected {ruleset.dim} features, got {X.shape[1]}")
    ids = np.full(len(X), NO_MATCH, dtype=np.int64)
    benign = np.zeros(len(X), dtype=bool)
    open_ = np.ones(len(X), dtype=bool)
    for clause in ruleset.ordered():
        if not open_.any():
            break
        idx = np.nonzero(open_)[0]
        hit = idx[clause.contains(X[idx])]
        ids[hit] = clause.id
        benign[hit] = clause.benign
        open_[hit] = False
    return benign, ids


def classify(ruleset: RuleSet, x) -> tuple[str, int]:
    benign, ids = classify_batch(ruleset, np.asarray(x, dtype=float)[None, :])
    return (BENIGN if benign[0] else ANOMALY), int(ids[0])


def extract_rules(model: SourceModel, threshold: float, data, sct_params: SctParams = SctParams(),
                  dbe_params: DbeParams = DbeParams(), feature_names=None) -> RuleSet:
    """Build the score clustering tree and turn each leaf into clauses.

    Anomalous leaves yield one anomalous-path clause.  Unlabeled leaves yield
    ``path & hypercube`` and ``path & extension`` benign clauses.
    """
    X = np.asarray(data, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("extraction needs non-empty benign data")
    scores = model.score_batch(X)
    tree = build_sct(X, model, threshold, sct_params, scores=scores)
    scale = tree.norm.hi - tree.norm.lo or 1.0

    clauses: list[Clause] = []
    for leaf in tree.leaves:
        path = path_rule(tree, leaf.id).as_dict()
        if leaf.label == UNLABELED:
            idx = np.asarray(leaf.samples)
            try:
                H = minimal_hypercube(X[idx], scores[idx], threshold)
            except NoNormalSample:
                log.warning("leaf %d has no sample scored strictly normal; relabelled anomalous", leaf.id)
                leaf.label = ANOMALOUS
            else:
                br = estimate_boundary(H, model, threshold, dbe_params, score_scale=scale, salt=leaf.id)
                for role, box in ((BENIGN_HYPERCUBE, H.intervals()), (BENIGN_EXTENSION, br.extension)):
                    clauses.append(Clause(len(clauses), role, leaf.id, PRIORITY[role], conjoin(path, box)))
                continue
        clauses.append(Clause(len(clauses), ANOMALOUS_PATH, leaf.id, PRIORITY[ANOMALOUS_PATH],
                              conjoin(path)))

    provenance = {
        "model_kind": model.kind,
        "threshold": float(threshold),
        "sct": {"max_depth": sct_params.max_depth, "epsilon": sct_params.epsilon},
        "dbe": {k: getattr(dbe_params, k) for k in dbe_params.__dataclass_fields__},
        "n_train": int(len(X)),
    }
    return RuleSet(
        clauses=tuple(clauses),
        dim=X.shape[1],
        feature_names=tuple(feature_names) if feature_names is not None else (),
        feature_range=(tuple(map(float, X.min(axis=0))), tuple(map(float, X.max(axis=0)))),
        provenance=provenance,
        tree=tree.without_samples(),
    )


# ---------------------------------------------------------------- file format

class RuleSetParseError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(strict=True, extra="forbid")


class _IntervalDoc(_Strict):
    dim: StrictInt
    lo: Optional[float]
    hi: Optional[float]
    lo_open: StrictBool


class _ClauseDoc(_Strict):
    id: StrictInt
    role: Literal[BENIGN_HYPERCUBE, BENIGN_EXTENSION, ANOMALOUS_PATH, EXCLUSION_PATCH]
    leaf: StrictInt
    priority: StrictInt
    bounds: list[_IntervalDoc]


class _NodeDoc(_Strict):
    id: StrictInt
    depth: StrictInt
    parent: Optional[StrictInt]
    feature: Optional[StrictInt]
    threshold: Optional[float]
    left: Optional[StrictInt]
    right: Optional[StrictInt]
    label: Optional[StrictInt]


class _TreeDoc(_Strict):
    dim: StrictInt
    score_min: float
    score_max: float
    max_depth: StrictInt
    epsilon: float
    nodes: list[_NodeDoc]


class _RangeDoc(_Strict):
    lo: list[float]
    hi: list[float]


class _RuleSetDoc(_Strict):
    format: Literal["flowrules-ruleset"]
    version: Literal[1]
    dim: StrictInt
    feature_names: list[str]
    feature_range: Optional[_RangeDoc]
    provenance: dict
    tree: Optional[_TreeDoc]
    clauses: list[_ClauseDoc]


def _num(v: float) -> float | None:
    return None if math.isinf(v) else v


def interval_to_doc(dim: int, iv: Interval) -> dict:
    return {"dim": dim, "lo": _num(iv.lo), "hi": _num(iv.hi), "lo_open": iv.lo_open}


def interval_from_doc(doc) -> tuple[int, Interval]:
    lo = -math.inf if doc.lo is None else doc.lo
    hi = math.inf if doc.hi is None else doc.hi
    return doc.dim, Interval(float(lo), float(hi), doc.lo_open)


def clause_to_doc(c: Clause) -> dict:
    return {"id": c.id, "role": c.role, "leaf": c.leaf, "priority": c.priority,
            "bounds": [interval_to_doc(d, iv) for d, iv in c.bounds]}


def clause_from_doc(doc) -> Clause:
    return Clause(doc.id, doc.role, doc.leaf, doc.priority,
                  tuple(interval_from_doc(b) for b in doc.bounds))


def _tree_to_doc(tree: ScoreClusteringTree) -> dict:
    return {
        "dim": tree.dim,
        "score_min": tree.norm.lo,
        "score_max": tree.norm.hi,
        "max_depth": tree.params.max_depth,
        "epsilon": tree.params.epsilon,
        "nodes": [{"id": n.id, "depth": n.depth, "parent": n.parent, "feature": n.feature,
                   "threshold": n.threshold, "left": n.left, "right": n.right, "label": n.label}
                  for n in tree.nodes],
    }


def _tree_from_doc(doc: _TreeDoc) -> ScoreClusteringTree:
    nodes = [SctNode(id=n.id, depth=n.depth, parent=n.parent, feature=n.feature,
                     threshold=None if n.threshold is None else float(n.threshold),
                     left=n.left, right=n.right, label=n.label) for n in doc.nodes]
    return ScoreClusteringTree(nodes=nodes, dim=doc.dim,
                               norm=ScoreNorm(float(doc.score_min), float(doc.score_max)),
                               params=SctParams(doc.max_depth, float(doc.epsilon)))


def to_doc(rs: RuleSet) -> dict:
    return {
        "format": RULESET_FORMAT,
        "version": RULESET_VERSION,
        "dim": rs.dim,
        "feature_names": list(rs.feature_names),
        "feature_range": None if rs.feature_range is None else
        {"lo": list(rs.feature_range[0]), "hi": list(rs.feature_range[1])},
        "provenance": rs.provenance,
        "tree": None if rs.tree is None else _tree_to_doc(rs.tree),
        "clauses": [clause_to_doc(c) for c in rs.clauses],
    }


def serialize(rs: RuleSet) -> str:
    return json.dumps(to_doc(rs), indent=1, sort_keys=False)


def _validation_message(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"])
        parts.append(f"field {loc}: {e['msg']}")
    return "; ".join(parts)


def parse(text: str) -> RuleSet:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RuleSetParseError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        doc = _RuleSetDoc.model_validate(raw)
    except ValidationError as exc:
        raise RuleSetParseError(_validation_message(exc)) from exc
    try:
        return RuleSet(
            clauses=tuple(clause_from_doc(c) for c in doc.clauses),
            dim=doc.dim,
            feature_names=tuple(doc.feature_names),
            feature_range=None if doc.feature_range is None else
            (tuple(float(v) for v in doc.feature_range.lo), tuple(float(v) for v in doc.feature_range.hi)),
            provenance=doc.provenance,
            tree=None if doc.tree is None else _tree_from_doc(doc.tree),
        )
    except ValueError as exc:
        raise RuleSetParseError(str(exc)) from exc


def save_ruleset(rs: RuleSet, path) -> None:
    Path(path).write_text(serialize(rs) + "\n")


def load_ruleset(path) -> RuleSet:
    return parse(Path(path).read_text())


def with_clauses(rs: RuleSet, clauses) -> RuleSet:
    return replace(rs, clauses=tuple(clauses))
