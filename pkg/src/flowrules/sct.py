"""Score Clustering Tree: CART-style partitioning driven by model scores.

The impurity of a node is the two-class Gini index of the node's mean
normalised score, so splits group samples of similar normality.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model_core import SourceModel

log = logging.getLogger(__name__)

ANOMALOUS = 1
UNLABELED = 0

# gains below this are float noise from equal-score partitions
GAIN_TOL = 1e-12


@dataclass(frozen=True)
class Interval:
    """``lo < x <= hi`` when ``lo_open`` else ``lo <= x <= hi``; bounds may be infinite."""

    lo: float = -math.inf
    hi: float = math.inf
    lo_open: bool = True

    def contains(self, x) -> np.ndarray | bool:
        lower = (x > self.lo) if self.lo_open else (x >= self.lo)
        return lower & (x <= self.hi)

    def intersect(self, other: "Interval") -> "Interval":
        if self.lo > other.lo:
            lo, lo_open = self.lo, self.lo_open
        elif other.lo > self.lo:
            lo, lo_open = other.lo, other.lo_open
        else:
            lo, lo_open = self.lo, self.lo_open or other.lo_open
        return Interval(lo, min(self.hi, other.hi), lo_open)

    @property
    def empty(self) -> bool:
        return self.hi < self.lo or (self.hi == self.lo and self.lo_open)

    @property
    def unbounded(self) -> bool:
        return self.lo == -math.inf and self.hi == math.inf


@dataclass(frozen=True)
class PathRule:
    """Conjunction of per-dimension intervals; absent dimensions are free."""

    bounds: tuple[tuple[int, Interval], ...] = ()

    def as_dict(self) -> dict[int, Interval]:
        return dict(self.bounds)

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ok = np.ones(len(X), dtype=bool)
        for dim, iv in self.bounds:
            ok &= iv.contains(X[:, dim])
        return ok


@dataclass(frozen=True)
class ScoreNorm:
    lo: float
    hi: float

    @property
    def degenerate(self) -> bool:
        return not self.hi > self.lo


def normalize_score(raw, norm: ScoreNorm):
    """Min-max scale into [0, 1], clamped; a degenerate range maps to 0.5."""
    if norm.degenerate:
        return np.full_like(np.asarray(raw, dtype=float), 0.5) if np.ndim(raw) else 0.5
    out = np.clip((np.asarray(raw, dtype=float) - norm.lo) / (norm.hi - norm.lo), 0.0, 1.0)
    return out if np.ndim(raw) else float(out)


def gini(p):
    return 2.0 * p * (1.0 - p)


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float


def best_split(X, p) -> Split | None:
    """Best (feature, midpoint) split by score-Gini gain.

    Ties go to the lowest feature index, then the lowest threshold.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    p = np.asarray(p, dtype=float)
    n = len(p)
    if n < 2:
        return None
    parent = gini(p.mean())
    best: Split | None = None
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs, ps = X[order, j], p[order]
        distinct = np.nonzero(xs[1:] > xs[:-1])[0]
        if len(distinct) == 0:
            continue
        csum = np.cumsum(ps)
        n_left = distinct + 1
        n_right = n - n_left
        mean_l = csum[distinct] / n_left
        mean_r = (csum[-1] - csum[distinct]) / n_right
        gains = parent - (n_left / n) * gini(mean_l) - (n_right / n) * gini(mean_r)
        k = int(np.argmax(gains))
        g = float(gains[k])
        if best is None or g > best.gain:
            a, b = xs[distinct[k]], xs[distinct[k] + 1]
            t = a + (b - a) / 2.0
            if not a <= t < b:
                t = a
            best = Split(j, float(t), g)
    if best is None or best.gain <= GAIN_TOL:
        return None
    return best


@dataclass
class SctNode:
    id: int
    depth: int
    parent: int | None = None
    feature: int | None = None
    threshold: float | None = None
    left: int | None = None
    right: int | None = None
    samples: tuple[int, ...] = ()
    label: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass(frozen=True)
class SctParams:
    max_depth: int = 4
    epsilon: float = 0.05

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class ScoreClusteringTree:
    nodes: list[SctNode]
    dim: int
    norm: ScoreNorm
    params: SctParams = field(default_factory=SctParams)

    @property
    def leaves(self) -> list[SctNode]:
        return [n for n in self.nodes if n.is_leaf]

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes)

    def apply(self, X) -> np.ndarray:
        """Leaf id for every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros(len(X), dtype=np.int64)
        stack = [(0, np.arange(len(X)))]
        while stack:
            nid, idx = stack.pop()
            node = self.nodes[nid]
            if node.is_leaf:
                out[idx] = nid
                continue
            go_left = X[idx, node.feature] <= node.threshold
            stack.append((node.left, idx[go_left]))
            stack.append((node.right, idx[~go_left]))
        return out

    def without_samples(self) -> "ScoreClusteringTree":
        return replace(self, nodes=[replace(n, samples=()) for n in self.nodes])

    def dump(self) -> str:
        lines: list[str] = []

        def walk(nid: int, indent: int) -> None:
            node = self.nodes[nid]
            pad = "  " * indent
            if node.is_leaf:
                tag = "anomalous" if node.label == ANOMALOUS else "unlabeled"
                lines.append(f"{pad}leaf {nid} [{tag}] n={len(node.samples)}")
                return
            lines.append(f"{pad}node {nid}: x{node.feature} <= {node.threshold!r}")
            walk(node.left, indent + 1)
            walk(node.right, indent + 1)

        walk(0, 0)
        return "\n".join(lines)


def build_sct(data, model: SourceModel, threshold: float, params: SctParams = SctParams(),
              scores=None) -> ScoreClusteringTree:
    """Grow the tree over ``data`` and label each leaf.

    A leaf is anomalous iff every one of its samples scores below ``threshold``.
    """
    X = np.asarray(data, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("cannot build a score clustering tree on empty data")
    raw = model.score_batch(X) if scores is None else np.asarray(scores, dtype=float)
    norm = ScoreNorm(float(raw.min()), float(raw.max()))
    if norm.degenerate:
        log.warning("all training scores are equal; tree collapses to a single leaf")
    p = normalize_score(raw, norm)

    nodes: list[SctNode] = [SctNode(id=0, depth=0)]
    stack = [(0, np.arange(len(X)))]
    while stack:
        nid, idx = stack.pop()
        node = nodes[nid]
        split = None
        if (len(idx) > 1 and node.depth < params.max_depth
                and p[idx].max() - p[idx].min() >= params.epsilon):
            split = best_split(X[idx], p[idx])
        if split is None:
            node.samples = tuple(int(i) for i in idx)
            node.label = ANOMALOUS if bool((raw[idx] < threshold).all()) else UNLABELED
            continue
        node.feature, node.threshold = split.feature, split.threshold
        go_left = X[idx, split.feature] <= split.threshold
        for side, mask in (("left", go_left), ("right", ~go_left)):
            child = SctNode(id=len(nodes), depth=node.depth + 1, parent=nid)
            nodes.append(child)
            setattr(node, side, child.id)
        stack.append((node.right, idx[~go_left]))
        stack.append((node.left, idx[go_left]))
    return ScoreClusteringTree(nodes=nodes, dim=X.shape[1], norm=norm, params=params)


def path_rule(tree: ScoreClusteringTree, leaf: int) -> PathRule:
    """Merged root-to-leaf constraints of ``leaf``."""
    if not 0 <= leaf < len(tree.nodes) or not tree.nodes[leaf].is_leaf:
        raise ValueError(f"node {leaf} is not a leaf of this tree")
    bounds: dict[int, Interval] = {}
    child = tree.nodes[leaf]
    while child.parent is not None:
        parent = tree.nodes[child.parent]
        if parent.left == child.id:
            c = Interval(hi=parent.threshold)
        else:
            c = Interval(lo=parent.threshold, lo_open=True)
        bounds[parent.feature] = bounds.get(parent.feature, Interval()).intersect(c)
        child = parent
    return PathRule(tuple(sorted(bounds.items())))
