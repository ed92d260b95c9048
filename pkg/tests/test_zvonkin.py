import math

import numpy as np
import pytest

from delaysde.measure import constant_segment, make_measure
from delaysde.model import ModelSpec, OperatorA, _const_Q, _zero_B, make_model
from delaysde.solver import SolverConfig, simulate
from delaysde.zvonkin import (
    CoverageError,
    DivergenceError,
    measure_K,
    ou_apply,
    simulate_transformed,
    solve_u,
    theta,
    theta_inverse,
    theta_inverse_segment,
    theta_segment,
    transformed_model,
    verify_decay,
)

RATES = np.array([1.0])


@pytest.fixture(scope="module")
def nu6():
    return make_measure("exponential", 1.0, 2.0**-6, lam=1.0)


@pytest.fixture(scope="module")
def ref6(nu6):
    return make_model("reference", measure=nu6)


@pytest.fixture(scope="module")
def sol_small(ref6):
    return solve_u(ref6, 16.0, 1.0, n_x=201, n_t=33)


def test_ou_apply_constant_and_linear():
    g = np.linspace(-10.0, 10.0, 801)
    dt = 0.3
    E = math.exp(-dt)
    ones = ou_apply(np.ones((801, 1)), [g], RATES, 1.0, dt)
    np.testing.assert_allclose(ones, 1.0, atol=1e-13)
    lin = ou_apply(g[:, None], [g], RATES, 1.0, dt)
    inner = np.abs(g) < 5.0  # away from the clipped edges
    np.testing.assert_allclose(lin[inner, 0], E * g[inner], atol=1e-12)


def test_ou_apply_second_moment():
    g = np.linspace(-10.0, 10.0, 801)
    dt = 0.3
    E = math.exp(-dt)
    var = (1.0 - math.exp(-2.0 * dt)) / 2.0
    out = ou_apply((g**2)[:, None], [g], RATES, 1.0, dt)
    inner = np.abs(g) < 5.0
    np.testing.assert_allclose(out[inner, 0], E**2 * g[inner] ** 2 + var, atol=5e-4)


def test_ou_apply_zero_time_identity():
    g = np.linspace(-2.0, 2.0, 21)
    vals = np.sin(g)[:, None]
    np.testing.assert_array_equal(ou_apply(vals, [g], RATES, 1.0, 0.0), vals)
    with pytest.raises(ValueError):
        ou_apply(vals, [g], RATES, 1.0, -0.1)


def test_ou_apply_two_dimensional_separable():
    g = np.linspace(-8.0, 8.0, 161)
    dt = 0.2
    E = math.exp(-dt)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    vals = (xx + yy)[..., None]
    out = ou_apply(vals, [g, g], np.array([1.0, 1.0]), 1.0, dt, quad_order=12)
    inner = (np.abs(xx) < 4) & (np.abs(yy) < 4)
    np.testing.assert_allclose(out[..., 0][inner], E * (xx + yy)[inner], atol=1e-10)


def test_solve_u_zero_drift_is_zero():
    sol = solve_u(make_model("ou"), 4.0, 1.0, n_x=101, n_t=17)
    assert sol.u_sup == 0.0
    assert sol.du_sup == 0.0


def test_solve_u_crude_sup_bound(sol_small, ref6):
    """From the fixed point: ||u|| <= (||grad u|| ||b|| + ||b||) / lam."""
    bound = (sol_small.du_sup * ref6.b_sup + ref6.b_sup) / sol_small.lam
    assert 0.0 < sol_small.u_sup <= bound
    assert sol_small.du_sup <= 0.5
    assert sol_small.ratios and sol_small.ratios[-1] < 1.0


def test_solve_u_terminal_condition(sol_small):
    # u(T, .) = 0
    assert np.abs(sol_small.u_tab[-1]).max() == 0.0


def test_solve_u_input_validation(ref6):
    with pytest.raises(ValueError):
        solve_u(ref6, 0.0, 1.0)
    with pytest.raises(ValueError):
        solve_u(make_model("zero"), 4.0, 1.0)  # degenerate diffusion


def test_solve_u_divergence_reported():
    def b(t, x):
        return 50.0 * np.tanh(5.0 * x)

    m = ModelSpec("steep", 1, 1, OperatorA([1.0]), b, _zero_B, _const_Q(1.0, 1, 1),
                  Q_bounds={"Q": 1.0})
    with pytest.raises(DivergenceError):
        solve_u(m, 0.05, 1.0, n_x=101, n_t=17, max_iter=30)


def test_theta_roundtrip(sol_small):
    x = np.linspace(-3.0, 3.0, 41)[:, None]
    for t in (0.0, 0.37, 1.0):
        y = theta(sol_small, t, x)
        back = theta_inverse(sol_small, t, y)
        assert np.abs(back - x).max() < 1e-10


def test_theta_segment_roundtrip(sol_small, nu6):
    rng = np.random.default_rng(0)
    seg = rng.uniform(-2.0, 2.0, (3, nu6.n_cells + 1, 1))
    fwd = theta_segment(sol_small, 0.5, seg, nu6.h)
    back = theta_inverse_segment(sol_small, 0.5, fwd, nu6.h)
    assert np.abs(back - seg).max() < 1e-10


def test_time_clamp_before_zero(sol_small):
    x = np.array([[0.5]])
    np.testing.assert_array_equal(sol_small.eval_u(-0.7, x), sol_small.eval_u(0.0, x))
    np.testing.assert_array_equal(sol_small.eval_u(5.0, x), sol_small.eval_u(sol_small.T, x))


def test_coverage_error_outside_grid(sol_small):
    far = np.array([[1e6]])
    with pytest.raises(CoverageError):
        sol_small.eval_u(0.0, far)
    with pytest.raises(CoverageError):
        theta_inverse(sol_small, 0.0, far)


def test_identity_transform_matches_plain_euler(nu6):
    """sol=None folds A into the delay drift; the step arithmetic is unchanged."""
    m = make_model("linear_delay", measure=nu6)
    tm = transformed_model(m, nu6, None)
    xi = constant_segment(nu6, 1.0)
    cfg = SolverConfig(h=2.0**-6, t_end=0.5, scheme="euler-maruyama")
    plain = simulate(m, nu6, xi, cfg, 4, 8)
    states, dW = simulate_transformed(tm, nu6, xi.values, cfg, 4, 8)
    np.testing.assert_array_equal(states, plain.states)
    np.testing.assert_array_equal(dW, plain.dW)
    np.testing.assert_array_equal(tm.to_base(0.0, np.array([[2.0]])), [[2.0]])


def test_transformed_model_requires_linear_part(nu6, sol_small, ref6):
    m_flat = ModelSpec("flat", 1, 1, None, lambda t, x: np.zeros_like(x), _zero_B,
                       _const_Q(1.0, 1, 1))
    with pytest.raises(ValueError):
        transformed_model(m_flat, nu6, None)


def test_transformed_drift_is_lipschitz_in_segment(nu6, ref6, sol_small):
    """The raw sqrt drift has unbounded difference quotients near 0; the
    transformed delay drift must show a finite sampled Lipschitz constant."""
    tm = transformed_model(ref6, nu6, sol_small)
    K = measure_K(tm, nu6, 1.0, n_samples=500, seed=1)
    assert 0.0 < K["Q_sup"] < 2.0
    assert 0.0 < K["QQt_inv_sup"] < 2.0
    assert 0.0 < K["B_lip"] < 4.0


def test_transform_equivalence_single_h(nu6, ref6, sol_small):
    """Integrating in transformed coordinates and pulling back stays close to
    the direct integration under shared noise."""
    tm = transformed_model(ref6, nu6, sol_small)
    xi = constant_segment(nu6, 0.5)
    cfg = SolverConfig(h=2.0**-6, t_end=0.5, scheme="euler-maruyama")
    plain = simulate(ref6, nu6, xi, cfg, 8, 4)
    xi_t = tm.seg_to_transformed(0.0, xi.values[None], nu6.h)[0]
    states, _ = simulate_transformed(tm, nu6, xi_t, cfg, 8, 4)
    n0 = nu6.n_cells
    err = 0.0
    for k in range(n0, states.shape[1]):
        t = (k - n0) * cfg.h
        back = theta_inverse(sol_small, t, states[:, k])
        err = max(err, float(np.abs(back - plain.states[:, k]).max()))
    assert err < 0.05


def test_verify_decay_small_ladder(ref6):
    rep = verify_decay(ref6, [8.0, 32.0], 1.0, n_x=101, n_t=17)
    assert rep.monotone
    assert rep.lam_star == 8.0
    assert rep.u_sups[1] <= rep.u_sups[0]
    assert rep.du_sups[1] <= rep.du_sups[0]
