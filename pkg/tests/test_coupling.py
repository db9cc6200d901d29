import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from revtransport import schedule as S
from revtransport.coupling import (
    CouplingState,
    CutoffPair,
    SimConfig,
    rc_eval,
    sample_endpoints,
    sc_eval,
    simulate,
    step,
    with_overrides,
)
from revtransport.potential import Certificate, PotentialSpec, double_well, quadratic

DW_CERT = Certificate(0.4, 2.0, 1.55)
Q_CERT = Certificate(1.0, 1.0, 0.25)


def make(pot=None, cert=DW_CERT, x0=(-0.5,), xp=(0.5,), T=0.5, dt=1e-2, n=200, seed=7, **kw):
    cfg = SimConfig(pot or double_well(len(x0)), cert, x0, xp, T, dt, n, seed, **kw)
    return cfg, S.make_schedule(cert, T, cfg.dist)


# -- cutoff -------------------------------------------------------------------


def test_cutoff_examples():
    c = CutoffPair(1.0, 1.0)
    assert rc_eval(c, 1.0) == 1.0
    assert rc_eval(c, 2.0) == pytest.approx(0.0, abs=1e-16)
    assert rc_eval(c, 1.5) == pytest.approx(math.sqrt(2) / 2, abs=1e-15)
    assert rc_eval(c, 0.0) == 1.0 and sc_eval(c, 0.0) == 0.0
    with pytest.raises(ValueError):
        rc_eval(c, -0.1)


@settings(max_examples=200, deadline=None)
@given(R=st.floats(1e-3, 5), w=st.floats(1e-3, 3), r=st.floats(0, 20), dr=st.floats(0, 5))
def test_cutoff_properties(R, w, r, dr):
    c = CutoffPair(R, w)
    a, b = rc_eval(c, r), sc_eval(c, r)
    assert abs(a * a + b * b - 1) <= 1e-15
    assert rc_eval(c, r + dr) <= a + 1e-15
    assert 0 <= a <= 1


# -- single steps -------------------------------------------------------------


def test_coupled_state_stays_coupled():
    cfg, sp = make()
    s = CouplingState(0.0, np.array([0.3]), np.array([0.3]), np.array([0.9]), coupled=True, sup_z=1.0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = step(s, cfg, sp, rng.standard_normal((2, 1)))
        assert s.coupled
        np.testing.assert_array_equal(s.x, s.x_pp)
    # no budget accrues after coupling
    assert s.girsanov_acc == 0.0


def _noise_part(pot, before, after, dt):
    g = pot.grad(before[None, :])
    tame = g / (1 + dt * np.linalg.norm(g))
    return after - before + tame[0] * dt


def test_far_field_is_synchronous():
    pot = quadratic(2)
    cfg, sp = make(pot, Q_CERT, (0.0, 0.0), (10.0, 0.0), T=1.0, dt=1e-2, shifted_drift=False)
    s0 = CouplingState.initial(cfg)
    xi = np.array([[0.3, -1.2], [0.7, 0.1]])
    s1 = step(s0, cfg, sp, xi)
    dB = _noise_part(pot, s0.x, s1.x, cfg.dt)
    dBbar = _noise_part(pot, s0.x_p, s1.x_p, cfg.dt)
    np.testing.assert_allclose(dB, dBbar, atol=1e-14)
    np.testing.assert_allclose(dB, 0.1 * xi[1], atol=1e-14)


def test_near_field_reflects():
    pot = quadratic(1)
    cfg, sp = make(pot, Certificate(1.0, 1.0, 1.0), (0.2,), (-0.2,), T=1.0, dt=1e-2, shifted_drift=False)
    s0 = CouplingState.initial(cfg)
    xi = np.array([[0.8], [-0.4]])
    s1 = step(s0, cfg, sp, xi)
    dB = _noise_part(pot, s0.x, s1.x, cfg.dt)
    dBbar = _noise_part(pot, s0.x_p, s1.x_p, cfg.dt)
    e = 1.0  # Z = x - x'' points in +x
    assert e * (dB - dBbar)[0] == pytest.approx(2 * 0.1 * 0.8, abs=1e-14)


def test_drift_shift_capped_at_gap():
    # a huge eta would overshoot; the cap lands X'' exactly on X in the drift part
    pot = quadratic(1)
    cfg, _ = make(pot, Certificate(1.0, 1.0, 1.0), (0.5,), (0.0,), T=1.0, dt=0.5)
    sp = S.ScheduleParams(T=1.0, nu=1.0, c0=1e-6, c1=1.0, dist=0.5, m_xx=2.0)
    s1 = step(CouplingState.initial(cfg), cfg, sp, np.zeros((2, 1)))
    assert s1.coupled
    np.testing.assert_array_equal(s1.x, s1.x_pp)


def test_step_rejects():
    cfg, sp = make(T=0.02, dt=1e-2)
    s = CouplingState.initial(cfg)
    with pytest.raises(ValueError):
        step(s, cfg, sp, np.zeros((2, 2)))
    s = step(step(s, cfg, sp, np.zeros((2, 1))), cfg, sp, np.zeros((2, 1)))
    with pytest.raises(ValueError):
        step(s, cfg, sp, np.zeros((2, 1)))


def test_config_rejects():
    with pytest.raises(ValueError):
        make(T=1.0, dt=0.3)
    with pytest.raises(ValueError):
        make(x0=(0.0, 0.0))
    with pytest.raises(ValueError):
        make(n=0)
    with pytest.raises(ValueError):
        make(eps_couple=0.0)
    cfg, sp = make()
    with pytest.raises(ValueError):
        simulate(cfg, S.make_schedule(DW_CERT, 1.0, 1.0))


@settings(max_examples=40, deadline=None)
@given(
    x=st.floats(-2, 2),
    xpp=st.floats(-2, 2),
    seed=st.integers(0, 2**31),
)
def test_step_invariants(x, xpp, seed):
    cfg, sp = make(x0=(x,), xp=(xpp,), T=0.2, dt=1e-2)
    s = CouplingState.initial(cfg)
    rng = np.random.default_rng(seed)
    was_coupled = s.coupled
    while s.t < cfg.T - 1e-12:
        prev = s.girsanov_acc
        s = step(s, cfg, sp, rng.standard_normal((2, 1)))
        assert s.girsanov_acc >= prev
        if was_coupled:
            assert s.coupled
            np.testing.assert_array_equal(s.x, s.x_pp)
        was_coupled = s.coupled
        assert s.sup_z >= abs(s.x[0] - s.x_pp[0]) or s.coupled


# -- full simulations ---------------------------------------------------------


def test_identical_start_gives_zeros():
    cfg, sp = make(x0=(0.3,), xp=(0.3,), n=300)
    stats = simulate(cfg, sp, grid_stride=5)
    assert np.all(stats.mean_abs_z == 0)
    assert stats.girsanov_integral == 0
    assert stats.coupled_fraction_at_T == 1.0
    assert stats.grid.size == len(stats.mean_abs_z) == len(stats.se_f_z)


def test_grid_includes_horizon():
    cfg, sp = make(T=0.5, dt=1e-2)
    stats = simulate(cfg, sp, grid_stride=7)
    assert stats.grid[0] == 0.0 and stats.grid[-1] == pytest.approx(0.5)
    assert np.all(stats.se_abs_z >= 0)


def _same(a, b):
    for k in ("grid", "mean_abs_z", "se_abs_z", "mean_sqrt_f_z", "mean_f_z", "per_path_girsanov", "x_T", "xp_T"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    assert a.girsanov_integral == b.girsanov_integral
    assert a.coupled_fraction_at_T == b.coupled_fraction_at_T


def test_deterministic_across_workers_and_blocking():
    cfg, sp = make(n=1000, block_size=128, chunk_steps=7)
    one = simulate(cfg, sp, grid_stride=3, workers=1)
    two = simulate(cfg, sp, grid_stride=3, workers=2)
    _same(one, two)
    # per-path streams make each path's result independent of block layout
    other = simulate(with_overrides(cfg, block_size=1000, chunk_steps=512), sp, grid_stride=3)
    np.testing.assert_array_equal(one.per_path_girsanov, other.per_path_girsanov)
    np.testing.assert_array_equal(one.x_T, other.x_T)


def test_seed_changes_result():
    cfg, sp = make(n=100)
    a = simulate(cfg, sp)
    b = simulate(with_overrides(cfg, seed=8), sp)
    assert not np.array_equal(a.x_T, b.x_T)


def test_divergence_is_counted():
    def bad_grad(x):
        return np.where(np.abs(x) > 1.0, np.nan, x)

    pot = PotentialSpec("bad", 1, bad_grad)
    cfg, sp = make(pot, Certificate(1.0, 1.0, 1.0), (0.8,), (0.5,), T=0.5, dt=1e-2, n=200)
    stats = simulate(cfg, sp)
    assert stats.n_diverged > 0
    assert stats.failed
    assert stats.per_path_girsanov.size == 200 - stats.n_diverged
    assert np.all(np.isfinite(stats.x_T))


def _moments_agree(a, b, n_se=4.0):
    for f in (lambda v: v, lambda v: v * v):
        fa, fb = f(a), f(b)
        se = math.hypot(fa.std(ddof=1) / math.sqrt(fa.size), fb.std(ddof=1) / math.sqrt(fb.size))
        assert abs(fa.mean() - fb.mean()) <= n_se * se


@pytest.mark.parametrize("pot_name", ["double_well", "quadratic"])
def test_marginal_laws_match_uncoupled_chains(pot_name):
    pot = double_well(1) if pot_name == "double_well" else quadratic(1)
    cert = DW_CERT if pot_name == "double_well" else Certificate(1.0, 1.0, 1.0)
    cfg, sp = make(pot, cert, (-0.5,), (0.5,), T=1.0, dt=1e-2, n=4000, shifted_drift=False)
    stats = simulate(cfg, sp)
    ref_x = sample_endpoints(pot, cfg.x0, 1.0, 1e-2, 4000, seed=99, stream=3)
    ref_xp = sample_endpoints(pot, cfg.x0_prime, 1.0, 1e-2, 4000, seed=99, stream=4)
    _moments_agree(stats.x_T[:, 0], ref_x[:, 0])
    _moments_agree(stats.xp_T[:, 0], ref_xp[:, 0])


def test_sample_endpoints_rejects():
    with pytest.raises(ValueError):
        sample_endpoints(quadratic(1), [0.0, 0.0], 1.0, 0.1, 10, 0)
    with pytest.raises(ValueError):
        sample_endpoints(quadratic(1), [0.0], 1.0, 0.3, 10, 0)


def test_se_scales_with_paths():
    cfg, sp = make(T=0.5, dt=1e-2, n=2000)
    a = simulate(cfg, sp)
    b = simulate(with_overrides(cfg, n_paths=8000), sp)
    assert b.girsanov_se / a.girsanov_se == pytest.approx(0.5, rel=0.2)
