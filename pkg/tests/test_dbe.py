import math

import numpy as np
import pytest

from flowrules.dbe import (HIGH, LOW, DbeParams, Hypercube, NoNormalSample, estimate_boundary, explore_face,
                           minimal_hypercube, sample_auxiliary)
from flowrules.model_core import CountingModel, SourceModel


class Fn(SourceModel):
    def __init__(self, fn, dim):
        self.fn, self.dim = fn, dim

    def score_batch(self, X):
        return self.fn(np.atleast_2d(np.asarray(X, dtype=float)))


PHI = 0.0


def tent():
    # boundary f = phi at |x| = 1
    return Fn(lambda X: PHI + 1 - np.abs(X[:, 0]), 1)


def test_minimal_hypercube_examples():
    H = minimal_hypercube([[1.0, 2.0]], [1.0], 0.0)
    assert list(H.lo) == [1.0, 2.0] and list(H.hi) == [1.0, 2.0]
    H = minimal_hypercube([[0.0, 0.0], [2.0, 4.0]], [1.0, 1.0], 0.0)
    assert list(H.lo) == [0.0, 0.0] and list(H.hi) == [2.0, 4.0]


def test_minimal_hypercube_filters_like_brute_force():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    s = rng.normal(size=50)
    H = minimal_hypercube(X, s, 0.2)
    keep = X[s > 0.2]
    np.testing.assert_array_equal(H.lo, keep.min(axis=0))
    np.testing.assert_array_equal(H.hi, keep.max(axis=0))
    assert H.contains(keep).all()


def test_minimal_hypercube_no_normal_sample():
    with pytest.raises(NoNormalSample):
        minimal_hypercube([[0.0]], [-1.0], 0.0)


def test_auxiliary_truncation_and_determinism():
    e = np.array([1.0, 2.0, 3.0])
    hi = sample_auxiliary(e, 1, HIGH, 0.5, 200, 7)
    lo = sample_auxiliary(e, 1, LOW, 0.5, 200, 7)
    assert (hi[:, 1] >= 2.0).all() and (lo[:, 1] <= 2.0).all()
    np.testing.assert_array_equal(hi, sample_auxiliary(e, 1, HIGH, 0.5, 200, 7))


def test_auxiliary_shrinks_with_radius():
    e = np.array([4.0, -1.0])
    pts = sample_auxiliary(e, 0, HIGH, 1e-9, 100, 1)
    assert np.abs(pts - e).max() <= 5e-9


def test_auxiliary_spread_matches_sigma():
    e = np.zeros(3)
    sigma = np.array([0.1, 0.2, 0.4])
    pts = sample_auxiliary(e, 2, HIGH, sigma, 100_000, 3)
    std = pts[:, :2].std(axis=0)
    assert np.all(np.abs(std / sigma[:2] - 1) < 0.05)
    # the folded axis keeps the scale as its root mean square about the face point
    rms = np.sqrt(np.mean(pts[:, 2] ** 2))
    assert abs(rms / sigma[2] - 1) < 0.05


def test_face_constraint_beyond_face_when_model_drops_outside():
    H = Hypercube([0.0, 0.0], [1.0, 1.0])
    model = Fn(lambda X: np.where((X <= 1.0).all(axis=1), 1.0, -1.0), 2)
    res = explore_face(H, 0, HIGH, model, PHI)
    assert res.kind == "constraint" and res.bound > 1.0


def test_constant_model_is_contour():
    H = Hypercube([0.0], [1.0])
    res = explore_face(H, 0, HIGH, Fn(lambda X: np.full(len(X), PHI + 1), 1), PHI)
    assert res.kind == "contour" and res.iterations == DbeParams().max_iters


@pytest.mark.parametrize("seed", range(5))
def test_tent_boundary_found_near_analytic_value(seed):
    H = Hypercube([-0.2], [0.2])
    hi = explore_face(H, 0, HIGH, tent(), PHI, DbeParams(seed=seed))
    lo = explore_face(H, 0, LOW, tent(), PHI, DbeParams(seed=seed))
    assert hi.kind == lo.kind == "constraint"
    assert 0.9 <= hi.bound <= 1.1
    assert -1.1 <= lo.bound <= -0.9


def test_query_budget_respected():
    H = Hypercube([0.0, 0.0], [1.0, 1.0])
    counter = CountingModel(Fn(lambda X: np.full(len(X), 1.0), 2))
    params = DbeParams(max_iters=7, n_explorers=5, n_aux=3)
    res = explore_face(H, 1, LOW, counter, PHI, params)
    assert counter.queries == res.queries <= params.query_budget()


def test_boundary_rule_semantics_and_soundness():
    model = Fn(lambda X: PHI + 1 - np.abs(X[:, 0]), 2)
    H = Hypercube([-0.2, -0.3], [0.2, 0.3])
    br = estimate_boundary(H, model, PHI)
    assert not br.fallback
    for dim, iv in enumerate(br.extension):
        assert iv.hi >= H.hi[dim] and iv.lo <= H.lo[dim]
    X = np.random.default_rng(0).uniform(-3, 3, (2000, 2))
    in_ext = np.all([iv.contains(X[:, d]) for d, iv in enumerate(br.extension)], axis=0)
    np.testing.assert_array_equal(br.contains(X), H.contains(X) | in_ext)
    assert br.contains([[0.0, 0.0]]).all()
    assert not br.contains([[5.0, 0.0]]).any()
    assert br == estimate_boundary(H, model, PHI)


def test_contour_dimension_leaves_extension_unbounded():
    # score steps down at |x0| = 0.5, out of reach when exploring along the thin dim 1
    model = Fn(lambda X: np.where(np.abs(X[:, 0]) <= 0.5, 1.0, -1.0), 2)
    H = Hypercube([-0.2, -1e-3], [0.2, 1e-3])
    br = estimate_boundary(H, model, PHI)
    assert not br.fallback
    assert math.isinf(br.extension[1].lo) and math.isinf(br.extension[1].hi)
    assert 0.5 <= br.extension[0].hi < 0.6 and -0.6 < br.extension[0].lo <= -0.5


def test_all_contour_falls_back_to_inflated_cube(caplog):
    H = Hypercube([0.0, 0.0], [1.0, 2.0])
    br = estimate_boundary(H, Fn(lambda X: np.ones(len(X)), 2), PHI)
    assert br.fallback
    assert "contour" in caplog.text
    assert br.extension[1].lo == pytest.approx(-0.2) and br.extension[1].hi == pytest.approx(2.2)
    assert not br.contains([[50.0, 50.0]]).any()


def test_point_inside_cube_is_member_regardless():
    H = Hypercube([0.0], [1.0])
    br = estimate_boundary(H, Fn(lambda X: np.where(np.abs(X[:, 0] - 0.5) <= 0.5, 1.0, -1.0), 1), PHI)
    assert br.contains([[0.5]]).all()


def test_params_validation():
    with pytest.raises(ValueError):
        DbeParams(n_explorers=0)
    with pytest.raises(ValueError):
        DbeParams(rho=0)
