import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import hand_mean
from dmrbsde.boundaries import LossFn, LossPair, TimeFn
from dmrbsde.condexp import RegressionSpec, conditional_path
from dmrbsde.dmr import PicardConfig, fixed_k_pass, picard_solve, solve_constant_coeff
from dmrbsde.drivers import DriverSpec
from dmrbsde.errors import ConfigError, ConvergenceError, TerminalConditionError


@pytest.fixture(scope="module")
def hand_solution(mid_ens, hand_losses):
    xi = mid_ens.W[:, -1].copy()
    return picard_solve(mid_ens, DriverSpec.zero(), xi, hand_losses)


# ---- drivers

@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_lipschitz_driver_bound(l1, l2, y1, y2, z1, z2):
    f = DriverSpec.lipschitz(l1, l2, c=0.3)
    lam = f.lipschitz_constant
    assert abs(f(0.5, y1, z1) - f(0.5, y2, z2)) <= lam * (abs(y1 - y2) + abs(z1 - z2)) + 1e-12


def test_driver_catalog():
    assert DriverSpec.zero()(0.0, np.ones(3), np.ones(3)).tolist() == [0, 0, 0]
    f = DriverSpec.affine(a=-1.0, b=0.5, c=TimeFn.poly([0, 1]))
    assert f(0.5, 2.0, 4.0) == pytest.approx(-2.0 + 2.0 + 0.5)
    assert f.depends_on_state and f.lipschitz_constant == 1.0
    assert not DriverSpec.affine(c=1.0).depends_on_state
    assert DriverSpec.lipschitz(0.3, 0.1).linear_in_y() is None
    with pytest.raises(ConfigError):
        DriverSpec("quadratic")


# ---- constant coefficients

def test_unconstrained_case_is_plain_regression(small_ens, wide_losses):
    xi = np.sin(small_ens.W[:, -1])
    sol = solve_constant_coeff(small_ens, np.zeros((small_ens.M, small_ens.grid.N + 1)), xi, wide_losses)
    assert np.all(sol.K == 0) and np.all(sol.K_R == 0) and np.all(sol.K_L == 0)
    expected = conditional_path(small_ens, xi, RegressionSpec(), 0, small_ens.grid.N)
    np.testing.assert_allclose(sol.Y, expected, atol=1e-13)


def test_deterministic_terminal_and_driver(small_ens, wide_losses):
    C = np.full((small_ens.M, small_ens.grid.N + 1), 0.5)
    sol = solve_constant_coeff(small_ens, C, np.full(small_ens.M, 2.0), wide_losses)
    expected = 2.0 + 0.5 * (1.0 - small_ens.grid.times)
    np.testing.assert_allclose(sol.Y, np.broadcast_to(expected, sol.Y.shape), atol=1e-12)
    assert np.max(np.abs(sol.Z)) <= 1e-12


def test_hand_scenario(hand_solution, mid_ens):
    times = mid_ens.grid.times
    assert np.max(np.abs(hand_solution.meanY - hand_mean(times))) <= 0.02
    assert np.all(hand_solution.K_L == 0)
    dev = hand_solution.Y - (mid_ens.W + hand_mean(times)[None, :])
    assert np.sqrt(np.mean(dev ** 2)) <= 0.02
    assert np.mean(np.abs(hand_solution.Z[:, :-1] - 1.0)) <= 0.05


def test_hand_scenario_structure(hand_solution):
    sol = hand_solution
    np.testing.assert_array_equal(sol.K, sol.K_R - sol.K_L)
    assert sol.K_R[0] == 0 and sol.K_L[0] == 0
    assert np.all(np.diff(sol.K_R) >= 0) and np.all(np.diff(sol.K_L) >= 0)
    assert sol.residuals["identity_error"] <= 1e-10
    eps_flat = 10 * sol.residuals["eps_root"] * max(sol.total_variation, 1.0)
    assert sol.residuals["flatoff_R"] <= eps_flat and sol.residuals["flatoff_L"] <= eps_flat
    assert sol.residuals["violation_sup"] <= sol.residuals["constraint_tol"]
    np.testing.assert_array_equal(sol.meanY, sol.Y.mean(axis=0) * 0 + sol.meanY)


def test_inadmissible_terminal(small_ens, hand_losses):
    with pytest.raises(TerminalConditionError):
        solve_constant_coeff(small_ens, np.zeros((small_ens.M, small_ens.grid.N + 1)),
                             small_ens.W[:, -1] + 3.0, hand_losses)


# ---- Picard

def test_zero_driver_takes_one_step(small_ens, hand_losses):
    xi = small_ens.W[:, -1].copy()
    pic = picard_solve(small_ens, DriverSpec.zero(), xi, hand_losses)
    one = solve_constant_coeff(small_ens, np.zeros((small_ens.M, small_ens.grid.N + 1)), xi, hand_losses)
    assert pic.iterations == 1
    np.testing.assert_array_equal(pic.Y, one.Y)
    np.testing.assert_array_equal(pic.K, one.K)


def test_linear_driver_closed_form(mid_ens, wide_losses):
    xi = mid_ens.W[:, -1].copy()
    sol = picard_solve(mid_ens, DriverSpec.affine(a=-1.0), xi, wide_losses, PicardConfig(tol=1e-12))
    exact = np.exp(-(1.0 - mid_ens.grid.times))[None, :] * mid_ens.W
    assert np.sqrt(np.mean((sol.Y - exact) ** 2)) <= 0.02
    assert np.all(sol.K == 0)


def test_nonlinear_driver_contracts(small_ens, hand_losses):
    xi = small_ens.W[:, -1].copy()
    sol = picard_solve(small_ens, DriverSpec.lipschitz(0.3, 0.0), xi, hand_losses, PicardConfig(tol=1e-10))
    trace = sol.residuals["delta_trace"][0]
    assert len(trace) >= 4
    assert all(b / a < 1 for a, b in zip(trace[:4], trace[1:4]))
    assert sol.total_variation > 0.5


def test_max_iter_without_progress_fails(small_ens, hand_losses):
    xi = small_ens.W[:, -1].copy()
    with pytest.raises(ConvergenceError) as info:
        picard_solve(small_ens, DriverSpec.lipschitz(0.3, 0.0), xi, hand_losses, PicardConfig(max_iter=1, tol=1e-14))
    assert info.value.exit_code == 2


def test_subintervals_agree_for_zero_driver(small_ens, hand_losses):
    xi = small_ens.W[:, -1].copy()
    one = picard_solve(small_ens, DriverSpec.zero(), xi, hand_losses)
    two = picard_solve(small_ens, DriverSpec.zero(), xi, hand_losses, PicardConfig(subintervals=5))
    np.testing.assert_allclose(two.meanY, one.meanY, atol=1e-12)
    np.testing.assert_allclose(two.K, one.K, atol=1e-12)
    assert two.residuals["identity_error"] <= 1e-10


def test_subintervals_must_divide_grid(small_ens, hand_losses):
    with pytest.raises(ConfigError):
        picard_solve(small_ens, DriverSpec.zero(), small_ens.W[:, -1].copy(), hand_losses,
                     PicardConfig(subintervals=7))


def test_subintervals_with_nonlinear_driver(small_ens, hand_losses):
    xi = small_ens.W[:, -1].copy()
    f = DriverSpec.lipschitz(0.3, 0.2)
    one = picard_solve(small_ens, f, xi, hand_losses, PicardConfig(tol=1e-12))
    two = picard_solve(small_ens, f, xi, hand_losses, PicardConfig(tol=1e-12, subintervals=2))
    assert np.max(np.abs(two.meanY - one.meanY)) <= 0.01
    assert two.residuals["violation_sup"] <= two.residuals["constraint_tol"]


def test_warped_losses_with_shift(small_ens):
    L = LossFn.tanh_warp(0.5, TimeFn.piecewise_linear([[0, 0.9], [1, 0.5]]), feature="brownian", kappa=0.2)
    R = LossFn.tanh_warp(0.5, TimeFn.piecewise_linear([[0, 0.5], [0.7, 0.3], [1, -0.2]]), feature="brownian",
                         kappa=0.2)
    xi = np.sin(small_ens.W[:, -1])
    sol = picard_solve(small_ens, DriverSpec.lipschitz(0.3, 0.2, c=0.1), xi, LossPair(L, R, 0.3),
                       PicardConfig(tol=1e-10))
    assert sol.total_variation > 0
    eps_flat = 10 * sol.residuals["eps_root"] * max(sol.total_variation, 1.0)
    assert sol.residuals["flatoff_R"] <= eps_flat and sol.residuals["flatoff_L"] <= eps_flat
    assert sol.residuals["violation_sup"] <= 1e-8 * (1 + 1.5)
    assert sol.residuals["identity_error"] <= 1e-10


def test_fixed_k_pass_rebuilds_solution(small_ens, hand_losses):
    xi = small_ens.W[:, -1].copy()
    f = DriverSpec.lipschitz(0.3, 0.2)
    sol = picard_solve(small_ens, f, xi, hand_losses, PicardConfig(tol=1e-14, max_iter=60))
    Y, Z = fixed_k_pass(small_ens, f, xi, sol.K)
    assert np.max(np.abs(Y.mean(axis=0) - sol.meanY)) <= 1e-6
