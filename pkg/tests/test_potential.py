import json

import numpy as np
import pytest

from revtransport.potential import (
    Certificate,
    PotentialSpec,
    builtin,
    double_well,
    grad,
    quadratic,
    verify_certificate,
)
from oracles import double_well_tightest

DW_CERT = Certificate(m=0.4, M=2.0, R=1.55)


def test_double_well_origin_is_critical():
    for d in (1, 2, 5):
        np.testing.assert_array_equal(grad(double_well(d), np.zeros(d)), np.zeros(d))


def test_quadratic_gradient_is_identity():
    np.testing.assert_array_equal(grad(quadratic(2), [2.0, 0.0]), [2.0, 0.0])


def test_double_well_at_one():
    assert grad(double_well(1), [1.0])[0] == 2.0


@pytest.mark.parametrize("bad", [[1.0, 2.0], [[1.0]], [np.nan], [np.inf]])
def test_grad_rejects_bad_points(bad):
    with pytest.raises(ValueError):
        grad(double_well(1), bad)


@pytest.mark.parametrize("pot", [quadratic(3, kappa=2.5), double_well(3), double_well(1)])
def test_grad_matches_central_differences(pot):
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, size=(50, pot.dim))
    pts *= rng.uniform(0, 10, size=(50, 1)) / np.maximum(np.linalg.norm(pts, axis=1, keepdims=True), 1e-9)
    h = 1e-5
    g = pot.grad(pts)
    for i in range(pot.dim):
        e = np.zeros(pot.dim)
        e[i] = h
        fd = (pot.value(pts + e) - pot.value(pts - e)) / (2 * h)
        scale = np.maximum(np.abs(g[:, i]), 1.0)
        assert np.all(np.abs(fd - g[:, i]) / scale < 1e-6)


def test_builtin_lookup():
    assert builtin("quadratic", 2, {"kappa": 3.0}).parameters == {"kappa": 3.0}
    with pytest.raises(ValueError):
        builtin("banana", 1)


@pytest.mark.parametrize("m,M,R", [(0, 1, 1), (2, 1, 1), (1, 1, 0), (1, np.inf, 1)])
def test_certificate_invariants(m, M, R):
    with pytest.raises(ValueError):
        Certificate(m, M, R)


def test_quadratic_certificate_passes_with_zero_margins():
    rep = verify_certificate(quadratic(2), Certificate(1, 1, 1), n_pairs=2000, seed=1)
    assert rep.passed
    assert rep.worst_near_margin >= 0 and rep.worst_far_margin >= 0


def test_quadratic_certificate_with_too_large_m_fails_far_branch():
    rep = verify_certificate(quadratic(2), Certificate(2, 2, 1), n_pairs=500, seed=1)
    assert not rep.passed
    assert rep.worst_far_margin < 0
    assert rep.worst_near_margin >= 0


def test_double_well_oracle_certificate():
    # Offline run at h = 1e-3 on [-5, 5]^2 gave, for R = 1.55, m = 0.405604 and
    # M = 1.999996; the shipped certificate rounds m down.  A coarser grid keeps
    # the test fast and must remain consistent with it.
    m_tight, M_tight = double_well_tightest([1.55], h=1e-2)[1.55]
    assert DW_CERT.m <= m_tight
    assert M_tight <= DW_CERT.M
    rep = verify_certificate(double_well(1), DW_CERT, n_pairs=20000, seed=5)
    assert rep.passed


def test_double_well_oracle_rejects_subcritical_radius():
    # separations just above sqrt(2) have a nonnegative ratio, so no m > 0 exists
    m_tight, _ = double_well_tightest([1.4], h=1e-2)[1.4]
    assert m_tight <= 0
    rep = verify_certificate(double_well(1), Certificate(0.1, 2.0, 1.3), n_pairs=5000, seed=2)
    assert not rep.passed


def test_stress_pairs_catch_what_random_pairs_miss():
    # a 1-d potential violating the far branch only for separations in (R, R + 0.01)
    R = 1.0

    def g(x):
        return x.copy()

    pot = PotentialSpec("spiky", 1, g)
    tight = Certificate(1.0, 1.0, R)
    assert verify_certificate(pot, tight, n_pairs=1, seed=0).passed
    assert verify_certificate(pot, tight, n_pairs=1, seed=0).n_stress_pairs > 0


def test_verify_is_deterministic_and_serialises():
    a = verify_certificate(double_well(2), DW_CERT, n_pairs=3000, seed=11)
    b = verify_certificate(double_well(2), DW_CERT, n_pairs=3000, seed=11)
    assert a == b
    d = json.loads(json.dumps(a.to_dict()))
    assert set(d) >= {"pass", "worst_near_margin", "worst_far_margin", "n_pairs", "seed"}


def test_verify_rejects_bad_inputs():
    with pytest.raises(ValueError):
        verify_certificate(quadratic(1), Certificate(1, 1, 1), n_pairs=0)
    with pytest.raises(ValueError):
        verify_certificate(quadratic(1), Certificate(1, 1, 1), radius=-1.0)


def test_sampled_pairs_respect_branches():
    # property form: every sampled pair obeys its branch for the double-well
    pot = double_well(1)
    rng = np.random.default_rng(0)
    x = rng.uniform(-5, 5, (20000, 1))
    y = rng.uniform(-5, 5, (20000, 1))
    h = x - y
    lhs = -np.sum(h * (pot.grad(x) - pot.grad(y)), axis=1)
    r2 = np.sum(h * h, axis=1)
    near = r2 <= DW_CERT.R**2
    assert np.all(lhs[near] <= DW_CERT.M * r2[near] + 1e-9)
    assert np.all(lhs[~near] <= -DW_CERT.m * r2[~near] + 1e-9)
