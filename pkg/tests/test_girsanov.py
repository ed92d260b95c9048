import math

import numpy as np
import pytest

from delaysde.girsanov import (
    SingularDiffusionError,
    direct_estimate,
    girsanov_shift,
    log_density,
    solve_qqt,
    weak_estimate,
)
from delaysde.measure import constant_segment, make_measure
from delaysde.model import make_functional, make_model
from delaysde.solver import SolverConfig, simulate


def test_solve_qqt_scalar():
    Q = np.array([[[2.0]], [[0.5]]])
    rhs = np.array([[4.0], [4.0]])
    # Q*(QQ*)^{-1} rhs = rhs / q in one dimension
    np.testing.assert_allclose(solve_qqt(Q, rhs), [[2.0], [8.0]])


def test_solve_qqt_matches_dense_inverse():
    rng = np.random.default_rng(0)
    Q = rng.normal(size=(5, 2, 3)) + np.concatenate([np.eye(2), np.zeros((2, 1))], axis=1)
    rhs = rng.normal(size=(5, 2))
    got = solve_qqt(Q, rhs)
    for i in range(5):
        QQt = Q[i] @ Q[i].T
        want = Q[i].T @ np.linalg.solve(QQt, rhs[i])
        np.testing.assert_allclose(got[i], want, rtol=1e-9)


def test_solve_qqt_singular():
    with pytest.raises(SingularDiffusionError):
        solve_qqt(np.zeros((1, 1, 1)), np.ones((1, 1)))
    Q = np.zeros((1, 2, 2))
    Q[0, 0, 0] = 1.0  # rank deficient
    with pytest.raises(SingularDiffusionError):
        solve_qqt(Q, np.ones((1, 2)))


def test_girsanov_shift_reference_formula():
    nu = make_measure("exponential", 1.0, 0.25, lam=1.0)
    m = make_model("reference", measure=nu, beta=0.5, sigma=1.0)
    seg = np.full((2, nu.n_cells + 1, 1), 0.25)
    psi = girsanov_shift(m, nu, 0.0, seg)
    # sigma = 1: psi = b + B = sqrt(0.25) + 0.5 nu(0.25)
    want = 0.5 + 0.5 * 0.25 * nu.total_mass()
    np.testing.assert_allclose(psi, want, rtol=1e-12)


def test_log_density_zero_for_driftless_model():
    nu = make_measure("uniform", 0.5, 0.125)
    m = make_model("ou")
    xi = constant_segment(nu, 1.0)
    cfg = SolverConfig(h=0.125, t_end=0.5)
    batch = simulate(m, nu, xi, cfg, 0, 8)
    np.testing.assert_array_equal(log_density(m, nu, batch, cfg), 0.0)


def test_weak_estimate_equals_direct_for_driftless_model():
    """b = B = 0 makes R = 1 and the reference process the process itself."""
    nu = make_measure("uniform", 0.5, 0.125)
    m = make_model("ou")
    xi = constant_segment(nu, 1.0)
    cfg = SolverConfig(h=0.125, t_end=0.5)
    f, _ = make_functional("tanh0")
    west = weak_estimate(m, nu, xi, f, 0.5, cfg, 3, 64)
    direct, _ = direct_estimate(m, nu, xi, f, 0.5, cfg, 3, 64)
    assert west.mean_R == 1.0
    assert west.stderr_R == 0.0
    assert west.ess == pytest.approx(64.0)
    assert west.unnormalized == pytest.approx(direct, abs=1e-15)
    assert west.self_normalized == pytest.approx(direct, abs=1e-15)


def test_weak_estimate_cross_validates_reference_model():
    nu = make_measure("exponential", 1.0, 2.0**-6, lam=1.0)
    m = make_model("reference", measure=nu)
    xi = constant_segment(nu, 1.0)
    cfg = SolverConfig(h=2.0**-6, t_end=0.5)
    f, _ = make_functional("tanh0")
    n = 4000
    direct, d_se = direct_estimate(m, nu, xi, f, 0.5, cfg, 21, n)
    west = weak_estimate(m, nu, xi, f, 0.5, cfg, 22, n)
    comb = math.sqrt(d_se**2 + west.stderr**2)
    assert abs(direct - west.unnormalized) <= 3.5 * comb
    assert abs(west.mean_R - 1.0) <= 3.5 * west.stderr_R
    assert west.ess > 0.01 * n
    assert not west.warnings


def test_weak_estimate_chunking_invariance():
    nu = make_measure("uniform", 0.5, 0.125)
    m = make_model("linear_delay", measure=nu)
    xi = constant_segment(nu, 1.0)
    cfg = SolverConfig(h=0.125, t_end=0.5)
    f, _ = make_functional("coord0_sq")
    a = weak_estimate(m, nu, xi, f, 0.5, cfg, 1, 50, chunk=7)
    b = weak_estimate(m, nu, xi, f, 0.5, cfg, 1, 50, chunk=50)
    assert a.unnormalized == pytest.approx(b.unnormalized, rel=1e-12)
    assert a.mean_R == pytest.approx(b.mean_R, rel=1e-12)


def test_horizon_must_match_config():
    nu = make_measure("uniform", 0.5, 0.125)
    m = make_model("ou")
    xi = constant_segment(nu, 1.0)
    cfg = SolverConfig(h=0.125, t_end=0.5)
    f, _ = make_functional("tanh0")
    with pytest.raises(ValueError):
        weak_estimate(m, nu, xi, f, 1.0, cfg, 0, 10)
    with pytest.raises(ValueError):
        direct_estimate(m, nu, xi, f, 1.0, cfg, 0, 10)
