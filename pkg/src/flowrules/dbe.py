"""Black-box decision boundary estimation around a leaf's minimal hypercube.

Each face of the hypercube is pushed outward by explorers: points sampled on
the face, perturbed by an outward-truncated Gaussian, ranked by model score
and stepped along the negative sign of a two-point slope estimate until the
model's score drops below the threshold.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .model_core import SourceModel
from .sct import Interval

log = logging.getLogger(__name__)

HIGH = "high"
LOW = "low"


class NoNormalSample(ValueError):
    """No sample in the subspace is scored normal by the source model."""


@dataclass(frozen=True)
class DbeParams:
    n_explorers: int = 16
    n_aux: int = 8
    rho: float = 0.1
    eta: float = 0.05
    max_iters: int = 20
    # fraction of the training-score range
    delta: float = 0.01
    seed: int = 0
    width_floor: float = 1e-9

    def __post_init__(self):
        if self.n_explorers < 1 or self.n_aux < 1 or self.max_iters < 1:
            raise ValueError("n_explorers, n_aux and max_iters must be >= 1")
        if not (self.rho > 0 and self.eta > 0 and self.delta > 0):
            raise ValueError("rho, eta and delta must be > 0")

    def query_budget(self) -> int:
        """Upper bound on model queries spent on one face."""
        return self.max_iters * self.n_explorers * (self.n_aux + 1)


@dataclass(frozen=True, eq=False)
class Hypercube:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if (self.lo > self.hi).any():
            raise ValueError("hypercube lower bounds exceed upper bounds")

    def __eq__(self, other):
        return (isinstance(other, Hypercube) and np.array_equal(self.lo, other.lo)
                and np.array_equal(self.hi, other.hi))

    @property
    def dim(self) -> int:
        return len(self.lo)

    def widths(self, floor: float = 0.0) -> np.ndarray:
        scale = np.maximum(1.0, np.maximum(np.abs(self.lo), np.abs(self.hi)))
        return np.maximum(self.hi - self.lo, floor * scale)

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return ((X >= self.lo) & (X <= self.hi)).all(axis=1)

    def intervals(self) -> tuple[Interval, ...]:
        return tuple(Interval(float(a), float(b), lo_open=False) for a, b in zip(self.lo, self.hi))


def minimal_hypercube(samples, scores, threshold: float) -> Hypercube:
    """Bounding box of the samples the model scores strictly above ``threshold``."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    normal = np.asarray(scores, dtype=float) > threshold
    if not normal.any():
        raise NoNormalSample("no sample scores above the threshold")
    return Hypercube(X[normal].min(axis=0), X[normal].max(axis=0))


def sample_auxiliary(e, i: int, face: str, sigma, n_aux: int, rng) -> np.ndarray:
    """``n_aux`` Gaussian draws around ``e`` with coordinate ``i`` folded outward."""
    rng = np.random.default_rng(rng)
    e = np.asarray(e, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), e.shape)
    pts = e + rng.standard_normal((n_aux, len(e))) * sigma
    out = np.abs(pts[:, i] - e[i])
    pts[:, i] = e[i] + out if face == HIGH else e[i] - out
    return pts


@dataclass(frozen=True)
class FaceResult:
    kind: str  # "constraint" | "contour"
    bound: float | None
    queries: int
    iterations: int


def explore_face(H: Hypercube, i: int, face: str, model: SourceModel, threshold: float,
                 params: DbeParams = DbeParams(), score_scale: float = 1.0, rng=None,
                 min_width=None) -> FaceResult:
    if face not in (HIGH, LOW):
        raise ValueError(f"face must be {HIGH!r} or {LOW!r}")
    rng = np.random.default_rng(params.seed if rng is None else rng)
    d = H.dim
    w = H.widths(params.width_floor)
    if min_width is not None:
        w = np.maximum(w, min_width)
    sigma = params.rho * w
    stride = params.eta * w
    face_val = H.hi[i] if face == HIGH else H.lo[i]
    outward = 1.0 if face == HIGH else -1.0
    n_e, n_s = params.n_explorers, params.n_aux
    tol = params.delta * score_scale

    E = H.lo + rng.random((n_e, d)) * (H.hi - H.lo)
    E[:, i] = face_val
    fE = model.score_batch(E)
    queries = n_e

    f_first = None
    best_pt, best_f = None, math.inf
    for it in range(1, params.max_iters + 1):
        A = np.stack([sample_auxiliary(e, i, face, sigma, n_s, rng) for e in E])
        flat = A.reshape(-1, d)
        fA = model.score_batch(flat)
        queries += len(flat)
        if f_first is None:
            f_first = float(fA.min())
        k = int(np.argmin(fA))
        if fA[k] < best_f:
            best_f, best_pt = float(fA[k]), flat[k].copy()

        below = fA < threshold
        if below.any():
            coord = flat[below, i]
            bound = coord.min() if face == HIGH else coord.max()
            return FaceResult("constraint", float(bound), queries, it)
        if it == params.max_iters:
            break

        keep = np.argsort(fA, kind="stable")[:n_e]
        parent = keep // n_s
        e, e_hat = E[parent], flat[keep]
        diff = e - e_hat
        rise = (fE[parent] - fA[keep])[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            grad = np.where(diff != 0, rise / np.where(diff != 0, diff, 1.0), 0.0)
        E = (e + e_hat) / 2.0 - stride * np.sign(grad)
        # explorers stay outside the hypercube along the explored axis
        E[:, i] = face_val + outward * np.maximum(outward * (E[:, i] - face_val), 0.0)
        fE = model.score_batch(E)
        queries += n_e

    if abs(f_first - best_f) < tol:
        return FaceResult("contour", None, queries, params.max_iters)
    return FaceResult("constraint", float(best_pt[i]), queries, params.max_iters)


@dataclass(frozen=True, eq=False)
class BoundaryRule:
    """Hypercube plus one extension box; membership is ``in H or in extension``."""

    hypercube: Hypercube
    extension: tuple[Interval, ...]
    fallback: bool = False
    queries: int = 0

    def __eq__(self, other):
        return (isinstance(other, BoundaryRule) and self.hypercube == other.hypercube
                and self.extension == other.extension and self.fallback == other.fallback)

    def extension_contains(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ok = np.ones(len(X), dtype=bool)
        for dim, iv in enumerate(self.extension):
            ok &= iv.contains(X[:, dim])
        return ok

    def contains(self, X) -> np.ndarray:
        return self.hypercube.contains(X) | self.extension_contains(X)


def estimate_boundary(H: Hypercube, model: SourceModel, threshold: float,
                      params: DbeParams = DbeParams(), score_scale: float = 1.0,
                      salt: int = 0, min_width=None) -> BoundaryRule:
    """Explore both faces of every dimension and compose the extension box.

    When every face comes back as a contour the extension would accept
    everything, so the hypercube inflated by ``rho * width`` is used instead.
    ``min_width`` sets a per-dimension lower bound on the width used for
    sampling and stepping, for hypercubes that are flat along some axes.
    """
    ext = []
    contours = 0
    queries = 0
    for i in range(H.dim):
        bounds = {}
        for bit, face in enumerate((LOW, HIGH)):
            rng = np.random.default_rng([params.seed, salt, i, bit])
            res = explore_face(H, i, face, model, threshold, params, score_scale, rng, min_width)
            queries += res.queries
            if res.kind == "contour":
                contours += 1
            else:
                bounds[face] = res.bound
        ext.append(Interval(bounds.get(LOW, -math.inf), bounds.get(HIGH, math.inf), lo_open=True))
    if contours == 2 * H.dim:
        log.warning("every face is a contour line; falling back to an inflated hypercube")
        w = H.widths(params.width_floor)
        pad = params.rho * (w if min_width is None else np.maximum(w, min_width))
        inflated = Hypercube(H.lo - pad, H.hi + pad)
        return BoundaryRule(H, inflated.intervals(), fallback=True, queries=queries)
    return BoundaryRule(H, tuple(ext), queries=queries)
