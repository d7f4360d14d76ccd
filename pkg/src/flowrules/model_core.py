"""Unsupervised source models behind one scoring contract.

Every model maps a batch of feature vectors to a normality score where higher
means more normal.  A sample is anomalous iff ``score(x) < threshold``.
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

MODEL_FORMAT = "flowrules-model"
MODEL_VERSION = 1

EULER_GAMMA = 0.5772156649015329


class TrainingError(ValueError):
    pass


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


def _as_batch(x, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ContractError(f"expected a vector or a 2-D batch, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ContractError(f"dimension mismatch: model expects {dim}, got {arr.shape[1]}")
    return arr


def average_path_length(n: int | np.ndarray) -> np.ndarray:
    """c(n): mean unsuccessful-search path length of a BST with n nodes."""
    n = np.asarray(n, dtype=float)
    out = np.zeros_like(n)
    big = n > 2
    out[n == 2] = 1.0
    nb = n[big]
    out[big] = 2.0 * (np.log(nb - 1.0) + EULER_GAMMA) - 2.0 * (nb - 1.0) / nb
    return out


class SourceModel:
    """Opaque scorer plus its anomaly threshold."""

    kind: str = "abstract"
    dim: int
    threshold: float | None = None

    def score_batch(self, X) -> np.ndarray:
        raise NotImplementedError

    def score(self, x) -> float | np.ndarray:
        """Score one vector (returns float) or a batch (returns array)."""
        arr = np.asarray(x, dtype=float)
        out = self.score_batch(_as_batch(arr, self.dim))
        return float(out[0]) if arr.ndim == 1 else out

    def is_anomalous(self, X) -> np.ndarray:
        if self.threshold is None:
            raise ContractError("model has no calibrated threshold")
        return self.score_batch(_as_batch(X, self.dim)) < self.threshold

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class IsolationTree:
    # flat node arrays; leaves have feature == -1
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def path_length(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            n = node[idx]
            go_left = X[idx, self.feature[n]] < self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return self.depth[node] + average_path_length(self.size[node])

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "size": self.size.tolist(),
            "depth": self.depth.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IsolationTree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            size=np.asarray(d["size"], dtype=np.int64),
            depth=np.asarray(d["depth"], dtype=np.int64),
        )


def _grow_tree(X: np.ndarray, height_limit: int, rng: np.random.Generator) -> IsolationTree:
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def new_node(n: int, dep: int) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        depth.append(dep)
        return len(feature) - 1

    stack = [(np.arange(len(X)), 0, new_node(len(X), 0))]
    while stack:
        idx, dep, node = stack.pop()
        if dep >= height_limit or len(idx) <= 1:
            continue
        sub = X[idx]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        candidates = np.nonzero(hi > lo)[0]
        if len(candidates) == 0:
            continue
        q = int(candidates[rng.integers(len(candidates))])
        p = float(rng.uniform(lo[q], hi[q]))
        if p <= lo[q]:
            p = float(np.nextafter(lo[q], hi[q]))
        mask = sub[:, q] < p
        feature[node] = q
        threshold[node] = p
        li = new_node(int(mask.sum()), dep + 1)
        ri = new_node(int((~mask).sum()), dep + 1)
        left[node] = li
        right[node] = ri
        stack.append((idx[~mask], dep + 1, ri))
        stack.append((idx[mask], dep + 1, li))

    return IsolationTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        size=np.asarray(size, dtype=np.int64),
        depth=np.asarray(depth, dtype=np.int64),
    )


def _pack_trees(trees: list[IsolationTree]) -> tuple[np.ndarray, ...]:
    """Pad per-tree node arrays into (n_trees, max_nodes) blocks."""
    width = max(len(t.feature) for t in trees)

    def pad(name, fill, dtype):
        out = np.full((len(trees), width), fill, dtype=dtype)
        for k, t in enumerate(trees):
            arr = getattr(t, name)
            out[k, : len(arr)] = arr
        return out

    leaf_len = np.zeros((len(trees), width))
    for k, t in enumerate(trees):
        leaf_len[k, : len(t.feature)] = t.depth + average_path_length(t.size)
    return (pad("feature", -1, np.int64), pad("threshold", 0.0, float),
            pad("left", -1, np.int64), pad("right", -1, np.int64), leaf_len)


def _forest_path_length(packed, X: np.ndarray) -> np.ndarray:
    feature, threshold, left, right, leaf_len = packed
    n_trees = feature.shape[0]
    rows = np.arange(n_trees)[None, :]
    node = np.zeros((len(X), n_trees), dtype=np.int64)
    while True:
        f = feature[rows, node]
        active = f >= 0
        if not active.any():
            break
        r, t = np.nonzero(active)
        n = node[r, t]
        go_left = X[r, f[r, t]] < threshold[t, n]
        node[r, t] = np.where(go_left, left[t, n], right[t, n])
    return leaf_len[rows, node]


@dataclass(eq=False)
class IsolationForest(SourceModel):
    trees: list[IsolationTree]
    subsample: int
    n_trees: int
    dim: int
    seed: int
    threshold: float | None = None
    kind: str = field(default="iforest", init=False)

    def __post_init__(self):
        self._packed = _pack_trees(self.trees)

    def score_batch(self, X) -> np.ndarray:
        X = _as_batch(X, self.dim)
        mean_depth = _forest_path_length(self._packed, X).mean(axis=1)
        c = float(average_path_length(self.subsample))
        if c == 0.0:
            return np.full(len(X), 0.5)
        return 1.0 - np.power(2.0, -mean_depth / c)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "seed": self.seed,
            "hyperparameters": {"n_trees": self.n_trees, "subsample": self.subsample},
            "threshold": self.threshold,
            "parameters": {"trees": [t.to_dict() for t in self.trees]},
        }


def train_iforest(data, n_trees: int = 100, subsample: int = 256, seed: int = 0) -> IsolationForest:
    """Fit an isolation forest; ``subsample`` is clipped to the data size."""
    X = np.asarray(data, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise TrainingError("training data is empty")
    if len(X) < 2 or subsample < 2:
        raise TrainingError("isolation forest needs at least 2 samples and subsample >= 2")
    if n_trees < 1:
        raise TrainingError("n_trees must be >= 1")
    if not np.isfinite(X).all():
        raise TrainingError("training data contains non-finite values")
    psi = min(subsample, len(X))
    height_limit = int(math.ceil(math.log2(psi)))
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n_trees):
        rows = rng.choice(len(X), size=psi, replace=False)
        trees.append(_grow_tree(X[rows], height_limit, rng))
    return IsolationForest(trees=trees, subsample=psi, n_trees=n_trees, dim=X.shape[1], seed=seed)


@dataclass(eq=False)
class GaussianMixtureDensity(SourceModel):
    """Diagonal-covariance Gaussian mixture; the score is the log-density."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    seed: int = 0
    n_iter: int = 100
    threshold: float | None = None
    kind: str = field(default="gmm", init=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if (self.variances <= 0).any():
            raise ContractError("mixture variances must be > 0")
        if not np.isclose(self.weights.sum(), 1.0):
            raise ContractError("mixture weights must sum to 1")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _component_logpdf(self, X: np.ndarray) -> np.ndarray:
        diff = X[:, None, :] - self.means[None, :, :]
        quad = (diff**2 / self.variances[None]).sum(axis=2)
        log_norm = -0.5 * (self.dim * np.log(2 * np.pi) + np.log(self.variances).sum(axis=1))
        return log_norm[None, :] - 0.5 * quad + np.log(self.weights)[None, :]

    def score_batch(self, X) -> np.ndarray:
        X = _as_batch(X, self.dim)
        return logsumexp(self._component_logpdf(X), axis=1)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "seed": self.seed,
            "hyperparameters": {"n_components": len(self.weights), "n_iter": self.n_iter},
            "threshold": self.threshold,
            "parameters": {
                "weights": self.weights.tolist(),
                "means": self.means.tolist(),
                "variances": self.variances.tolist(),
            },
        }


def train_gmm(data, n_components: int = 3, n_iter: int = 100, seed: int = 0,
              var_floor: float = 1e-6) -> GaussianMixtureDensity:
    """EM for a diagonal Gaussian mixture, initialised from random data rows."""
    X = np.asarray(data, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise TrainingError("training data is empty")
    k = min(n_components, len(X))
    rng = np.random.default_rng(seed)
    scale = np.maximum(X.var(axis=0), var_floor)
    floor = var_floor * scale
    means = X[rng.choice(len(X), size=k, replace=False)].copy()
    variances = np.tile(scale, (k, 1))
    weights = np.full(k, 1.0 / k)
    prev = -np.inf
    for _ in range(n_iter):
        model = GaussianMixtureDensity(weights, means, variances)
        logp = model._component_logpdf(X)
        total = logsumexp(logp, axis=1)
        resp = np.exp(logp - total[:, None])
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / nk.sum()
        means = (resp.T @ X) / nk[:, None]
        variances = np.maximum((resp.T @ X**2) / nk[:, None] - means**2, floor)
        ll = total.mean()
        if abs(ll - prev) < 1e-8:
            break
        prev = ll
    return GaussianMixtureDensity(weights, means, variances, seed=seed, n_iter=n_iter)


class ExternalModel(SourceModel):
    """Adapter for a scorer living outside this package.

    ``scorer`` receives an ``(n, d)`` float array and returns ``n`` scores.
    ``from_command`` builds one that pipes CSV rows to a subprocess and reads
    one score per output line.
    """

    kind = "external"

    def __init__(self, scorer: Callable[[np.ndarray], Sequence[float]], dim: int,
                 threshold: float | None = None, command: str | None = None):
        self._scorer = scorer
        self.dim = dim
        self.threshold = threshold
        self.command = command

    @classmethod
    def from_command(cls, command: str, dim: int, threshold: float | None = None) -> "ExternalModel":
        argv = shlex.split(command)

        def run(X: np.ndarray) -> list[float]:
            payload = "\n".join(",".join(repr(float(v)) for v in row) for row in X) + "\n"
            proc = subprocess.run(argv, input=payload, capture_output=True, text=True, check=True)
            return [float(line) for line in proc.stdout.split()]

        return cls(run, dim, threshold, command)

    def score_batch(self, X) -> np.ndarray:
        X = _as_batch(X, self.dim)
        out = np.asarray(self._scorer(X), dtype=float)
        if out.shape != (len(X),):
            raise ContractError(f"external scorer returned shape {out.shape} for {len(X)} rows")
        if not np.isfinite(out).all():
            raise ContractError("external scorer returned non-finite scores")
        return out

    def to_dict(self) -> dict:
        if self.command is None:
            raise ContractError("only command-backed external models can be serialised")
        return {
            "kind": self.kind,
            "dim": self.dim,
            "seed": None,
            "hyperparameters": {"command": self.command},
            "threshold": self.threshold,
            "parameters": {},
        }


class CountingModel(SourceModel):
    """Wraps a model and counts how many vectors it has scored."""

    def __init__(self, inner: SourceModel):
        self.inner = inner
        self.kind = inner.kind
        self.dim = inner.dim
        self.threshold = inner.threshold
        self.queries = 0
        self._lock = threading.Lock()

    def score_batch(self, X) -> np.ndarray:
        X = _as_batch(X, self.dim)
        with self._lock:
            self.queries += len(X)
        return self.inner.score_batch(X)


def score(model: SourceModel, x) -> float | np.ndarray:
    return model.score(x)


def calibrate_threshold(model: SourceModel, data, q: float = 0.01) -> float:
    """Lower empirical q-quantile of the training scores.

    At most ``q * n`` training samples score strictly below the result.
    """
    if not 0.0 < q < 1.0:
        raise ContractError(f"quantile must lie in (0, 1), got {q}")
    X = _as_batch(data, model.dim)
    if len(X) < 1.0 / q:
        raise ContractError(f"need at least {math.ceil(1 / q)} samples for q={q}, got {len(X)}")
    scores = model.score_batch(X)
    return quantile_lower(scores, q)


def quantile_lower(scores, q: float) -> float:
    return float(np.quantile(np.asarray(scores, dtype=float), q, method="lower"))


def dumps_model(model: SourceModel) -> str:
    doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION, **model.to_dict()}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def loads_model(text: str) -> SourceModel:
    doc = json.loads(text)
    if doc.get("format") != MODEL_FORMAT:
        raise ContractError("not a flowrules model file")
    if doc.get("version") != MODEL_VERSION:
        raise ContractError(f"unsupported model version {doc.get('version')}")
    kind, hp, params = doc["kind"], doc["hyperparameters"], doc["parameters"]
    if kind == "iforest":
        model = IsolationForest(
            trees=[IsolationTree.from_dict(t) for t in params["trees"]],
            subsample=hp["subsample"], n_trees=hp["n_trees"], dim=doc["dim"], seed=doc["seed"])
    elif kind == "gmm":
        model = GaussianMixtureDensity(params["weights"], params["means"], params["variances"],
                                       seed=doc["seed"], n_iter=hp["n_iter"])
    elif kind == "external":
        model = ExternalModel.from_command(hp["command"], doc["dim"])
    else:
        raise ContractError(f"unknown model kind {kind!r}")
    model.threshold = doc["threshold"]
    return model


def save_model(model: SourceModel, path) -> None:
    Path(path).write_text(dumps_model(model) + "\n")


def load_model(path) -> SourceModel:
    return loads_model(Path(path).read_text())
