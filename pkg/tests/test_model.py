import math

import numpy as np
import pytest

from delaysde.measure import make_measure
from delaysde.model import (
    DiniModulus,
    OperatorA,
    dini_check,
    make_functional,
    make_model,
    semigroup_factors,
    validate_assumptions,
)


def test_operator_requires_positive_rates():
    with pytest.raises(ValueError):
        OperatorA([1.0, 0.0])
    with pytest.raises(ValueError):
        OperatorA([-1.0])


def test_operator_apply():
    A = OperatorA([1.0, 2.0])
    np.testing.assert_allclose(A.apply(np.array([3.0, 3.0])), [-3.0, -6.0])
    assert A.d == 2


def test_semigroup_factors_values():
    E, J = semigroup_factors(OperatorA([2.0]), 0.5)
    assert abs(E[0] - math.exp(-1.0)) < 1e-15
    assert abs(J[0] - (1.0 - math.exp(-1.0)) / 2.0) < 1e-15


def test_semigroup_factors_zero_rate_limit():
    E, J = semigroup_factors(np.array([0.0]), 0.25)
    assert E[0] == 1.0
    assert J[0] == 0.25


def test_semigroup_factors_domain():
    with pytest.raises(ValueError):
        semigroup_factors(np.array([-1.0]), 0.1)
    with pytest.raises(ValueError):
        semigroup_factors(np.array([1.0]), 0.0)


def test_dini_power_half_passes():
    rep = dini_check(DiniModulus.power(0.5))
    assert rep.monotone and rep.square_concave and rep.dini_convergent
    assert rep.passed


def test_dini_linear_fails_square_concavity():
    """phi(s) = k s has convex square, so it sits outside the Dini class."""
    rep = dini_check(DiniModulus.linear(2.0))
    assert rep.monotone
    assert not rep.square_concave
    assert not rep.passed


def test_dini_log_integral_diverges():
    # phi(s) = c / log(e + 1/s) gives a harmonic dyadic tail
    rep = dini_check(DiniModulus.log(1.0))
    assert rep.monotone
    assert not rep.dini_convergent
    assert not rep.passed


def test_dini_check_needs_dyadic_grid():
    with pytest.raises(ValueError):
        dini_check(DiniModulus.power(0.5), s_grid=np.array([0.5, 0.25]))


def test_catalog_reference_coefficients():
    nu = make_measure("exponential", 1.0, 0.25, lam=1.0)
    m = make_model("reference", measure=nu, beta=0.5)
    x = np.array([[4.0], [0.25], [-0.25]])
    np.testing.assert_allclose(m.b(0.0, x), [[1.0], [0.5], [0.5]])
    seg = np.ones((2, nu.n_cells + 1, 1))
    np.testing.assert_allclose(m.B(0.0, seg, nu), 0.5 * nu.total_mass() * np.ones((2, 1)))
    Q = m.Q(0.0, x)
    assert Q.shape == (3, 1, 1)
    np.testing.assert_allclose(Q, 1.0)
    assert m.b_sup == 1.0
    assert abs(m.B_lip_sq - 0.25 * nu.total_mass()) < 1e-14


def test_catalog_linear_delay_has_no_instant_drift():
    nu = make_measure("uniform", 1.0, 0.25)
    m = make_model("linear_delay", measure=nu)
    np.testing.assert_array_equal(m.b(0.0, np.ones((3, 1))), 0.0)
    assert m.bihari is not None
    assert "diverges" in m.bihari.note


def test_catalog_needs_measure_for_delay_models():
    with pytest.raises(ValueError):
        make_model("reference")
    with pytest.raises(ValueError):
        make_model("linear_delay")


def test_catalog_zero_and_unknown():
    m = make_model("zero", lam=2.0, d=2)
    np.testing.assert_array_equal(m.Q(0.0, np.ones((4, 2))), 0.0)
    with pytest.raises(ValueError):
        make_model("heston")


def test_catalog_tabulated_drift():
    nu = make_measure("uniform", 1.0, 0.25)
    m = make_model("tabulated", measure=nu, xs=[-1.0, 0.0, 1.0], ys=[-0.5, 0.0, 0.5])
    np.testing.assert_allclose(m.b(0.0, np.array([[0.5]])), [[0.25]])
    # saturates outside the table
    np.testing.assert_allclose(m.b(0.0, np.array([[10.0]])), [[0.5]])
    assert m.phi.params["slope"] == 0.5


def test_validate_assumptions_reference_passes():
    nu = make_measure("exponential", 1.0, 0.25, lam=1.0)
    m = make_model("reference", measure=nu)
    rep = validate_assumptions(m, nu, 1.0, n_samples=1000, seed=0)
    assert rep.a2.passed
    assert rep.a3.passed, rep.a3.witness
    assert rep.a4.passed, rep.a4.witness
    assert rep.passed


def test_validate_assumptions_quadratic_fails_dini_bound():
    nu = make_measure("uniform", 1.0, 0.25)
    m = make_model("quadratic")
    rep = validate_assumptions(m, nu, 1.0, n_samples=1000, seed=0)
    assert not rep.a3.passed
    assert rep.a3.worst > 1.0
    assert not rep.passed


def test_validate_assumptions_sample_floor():
    nu = make_measure("uniform", 1.0, 0.25)
    with pytest.raises(ValueError):
        validate_assumptions(make_model("ou"), nu, 1.0, n_samples=10)


def test_functionals_shapes_and_positivity():
    nu = make_measure("uniform", 1.0, 0.25)
    seg = np.random.default_rng(0).normal(size=(6, nu.n_cells + 1, 1))
    for name in ("tanh0", "tanh0_pos", "boxind_pos", "expnorm_pos", "coord0", "coord0_sq", "const"):
        f, pos = make_functional(name, nu)
        v = f(seg)
        assert v.shape == (6,)
        if pos:
            assert np.all(v > 0)
    f, _ = make_functional("coord0")
    np.testing.assert_array_equal(f(seg), seg[:, -1, 0])
    with pytest.raises(ValueError):
        make_functional("parity")
    with pytest.raises(ValueError):
        make_functional("expnorm_pos")


def test_functional_tanh0_bounded():
    f, _ = make_functional("tanh0")
    seg = 100.0 * np.ones((2, 5, 1))
    assert np.all(np.abs(f(seg)) <= 1.0)
