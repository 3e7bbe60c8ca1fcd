import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from dmrbsde.condexp import (
    RegressionSpec,
    TerminalFn,
    extract_martingale_z,
    gaussian_expectation,
    quadrature_condexp_oracle,
    regress_condexp,
)
from dmrbsde.errors import ConfigError, NumericError, OracleUnavailable
from dmrbsde.grid import make_grid, sample_ensemble


def test_spec_validation():
    with pytest.raises(ConfigError):
        RegressionSpec(degree=-1)
    with pytest.raises(ConfigError):
        RegressionSpec(ridge=-1.0)


def test_brownian_terminal_at_half(mid_ens):
    k = mid_ens.grid.index_of(0.5)
    fit = regress_condexp(mid_ens, mid_ens.W[:, -1], k, RegressionSpec(degree=1))
    assert np.max(np.abs(fit - mid_ens.W[:, k])) <= 0.05


def test_brownian_terminal_degree_four_rms(mid_ens):
    k = mid_ens.grid.index_of(0.5)
    fit = regress_condexp(mid_ens, mid_ens.W[:, -1], k, RegressionSpec(degree=4))
    assert np.sqrt(np.mean((fit - mid_ens.W[:, k]) ** 2)) <= 0.02


def test_square_terminal(mid_ens):
    k = mid_ens.grid.index_of(0.3)
    t = mid_ens.grid.times[k]
    fit = regress_condexp(mid_ens, mid_ens.W[:, -1] ** 2, k, RegressionSpec(degree=2))
    exact = mid_ens.W[:, k] ** 2 + (1 - t)
    assert np.sqrt(np.mean((fit - exact) ** 2)) <= 0.03


def test_constant_target_is_reproduced(small_ens):
    fit = regress_condexp(small_ens, np.full(small_ens.M, 1.25), 17)
    assert np.all(fit == 1.25)


def test_endpoints(small_ens):
    target = small_ens.W[:, -1] ** 3
    first = regress_condexp(small_ens, target, 0)
    assert np.all(first == first[0]) and first[0] == pytest.approx(np.mean(target), abs=1e-13)
    np.testing.assert_array_equal(regress_condexp(small_ens, target, small_ens.grid.N), target)


@given(st.integers(1, 49), st.integers(0, 6))
def test_mean_is_preserved(k, degree):
    ens = sample_ensemble(make_grid(1.0, 50), 2000, seed=k)
    target = np.sin(3 * ens.W[:, -1]) + ens.W[:, -1] ** 2
    fit = regress_condexp(ens, target, k, RegressionSpec(degree=degree))
    assert np.mean(fit) == pytest.approx(np.mean(target), abs=1e-12)


def test_non_finite_target(small_ens):
    target = np.zeros(small_ens.M)
    target[0] = np.inf
    with pytest.raises(NumericError):
        regress_condexp(small_ens, target, 3)


def test_martingale_of_brownian_terminal(mid_ens):
    Mart, Z = extract_martingale_z(mid_ens, mid_ens.W[:, -1])
    assert np.all(Mart[:, 0] == 0)
    np.testing.assert_allclose(Mart[:, -1], mid_ens.W[:, -1] - mid_ens.W[:, -1].mean(), atol=1e-12)
    assert np.mean(np.abs(Z[:, :-1] - 1.0)) <= 0.05


def test_constant_terminal_has_no_martingale(small_ens):
    Mart, Z = extract_martingale_z(small_ens, np.full(small_ens.M, 3.0))
    assert np.all(Mart == 0) and np.all(Z == 0)


def test_square_terminal_integrand(mid_ens):
    # d(B^2) = 2 B dB + dt
    _, Z = extract_martingale_z(mid_ens, mid_ens.W[:, -1] ** 2, RegressionSpec(degree=2))
    k = mid_ens.grid.index_of(0.5)
    assert np.sqrt(np.mean((Z[:, k] - 2 * mid_ens.W[:, k]) ** 2)) <= 0.15


def test_telescoping_residual_shrinks_with_paths():
    grid = make_grid(1.0, 50)
    res = []
    for M in (1000, 16000):
        ens = sample_ensemble(grid, M, seed=2)
        H = np.sin(ens.W[:, -1])
        Mart, Z = extract_martingale_z(ens, H)
        stoch = np.sum(Z[:, :-1] * ens.dW, axis=1)
        res.append(np.sqrt(np.mean((stoch - Mart[:, -1]) ** 2)))
    assert res[1] < res[0]


def test_tower_property(mid_ens):
    H = np.cos(mid_ens.W[:, -1])
    k1, k2 = 30, 70
    inner = regress_condexp(mid_ens, H, k2)
    two_step = regress_condexp(mid_ens, inner, k1)
    one_step = regress_condexp(mid_ens, H, k1)
    exact = np.cos(mid_ens.W[:, k1]) * np.exp(-0.5 * (1 - mid_ens.grid.times[k1]))
    err = np.sqrt(np.mean((one_step - exact) ** 2))
    assert np.sqrt(np.mean((two_step - one_step) ** 2)) <= 2 * max(err, 1e-3)


# ---- quadrature oracle

def test_oracle_identity_and_square():
    assert quadrature_condexp_oracle(TerminalFn.affine(), 0.3, 0.7, 1.0) == pytest.approx(0.7, abs=1e-14)
    assert quadrature_condexp_oracle(TerminalFn.poly([0, 0, 1]), 0.5, 1.0, 1.0) == pytest.approx(1.5, abs=1e-13)


def test_oracle_call_closed_form():
    exact = norm.pdf(1.0) - (1 - norm.cdf(1.0))
    assert quadrature_condexp_oracle(TerminalFn.call(1.0), 0.0, 0.0, 1.0) == pytest.approx(exact, abs=1e-12)
    assert exact == pytest.approx(0.0833, abs=1e-4)


@given(st.floats(-5, 5), st.floats(0, 0.99), st.floats(-2, 2))
def test_oracle_call_matches_bachelier(b, t, strike):
    sd = np.sqrt(1 - t)
    d = (b - strike) / sd
    exact = (b - strike) * norm.cdf(d) + sd * norm.pdf(d)
    assert abs(quadrature_condexp_oracle(TerminalFn.call(strike), t, b, 1.0) - exact) <= 1e-10


@given(st.floats(-5, 5), st.floats(0, 0.99))
def test_oracle_sin_closed_form(b, t):
    exact = np.sin(b) * np.exp(-0.5 * (1 - t))
    assert abs(quadrature_condexp_oracle(TerminalFn.sin(), t, b, 1.0) - exact) <= 1e-10


def test_oracle_unavailable_for_custom():
    with pytest.raises(OracleUnavailable):
        quadrature_condexp_oracle(TerminalFn("custom", fn=np.exp), 0.0, 0.0, 1.0)


@pytest.mark.parametrize("phi", [TerminalFn.sin(), TerminalFn.call(0.0), TerminalFn.poly([0, 1, 0, 1])],
                         ids=["sin", "call", "cubic"])
def test_regression_agrees_with_oracle(mid_ens, phi):
    spec = RegressionSpec()
    k = mid_ens.grid.index_of(0.5)
    target = phi(mid_ens.W[:, -1])
    fit = regress_condexp(mid_ens, target, k, spec)
    idx = np.arange(0, mid_ens.M, 100)
    exact = quadrature_condexp_oracle(phi, 0.5, mid_ens.W[idx, k], 1.0)
    rms = np.sqrt(np.mean((fit[idx] - exact) ** 2))
    # standard error of a (degree+1)-parameter least-squares fit
    se = np.std(target - fit) * np.sqrt((spec.degree + 1) / mid_ens.M)
    assert rms <= 3 * se


def test_gaussian_expectation_degenerate():
    assert gaussian_expectation(np.exp, 0.5, 0.0) == pytest.approx(np.exp(0.5))
