import dataclasses
import os

import numpy as np
import pytest

from dmrbsde.boundaries import TimeFn, induced_boundary
from dmrbsde.config import parse_scenario
from dmrbsde.diagnostics import (
    BackwardInstance,
    build_report,
    constraint_violation,
    dynkin_value,
    flatoff_residual,
    sandwich_check,
    stability_bound,
    stability_check,
)
from dmrbsde.dmr import picard_solve
from dmrbsde.drivers import DriverSpec
from dmrbsde.errors import ConfigError
from dmrbsde.grid import sample_ensemble
from dmrbsde.penalized import LinearObstacles
from dmrbsde.skorokhod import BoundaryFn

SCEN = os.path.join(os.path.dirname(__file__), os.pardir, "scenarios")
ZERO = DriverSpec("zero")


@pytest.fixture(scope="module")
def hand(mid_ens, hand_losses):
    xi = mid_ens.W[:, -1]
    return xi, picard_solve(mid_ens, ZERO, xi, hand_losses)


@pytest.fixture(scope="module")
def nonlinear():
    cfg = parse_scenario(os.path.join(SCEN, "nonlinear.yaml"))
    ens = sample_ensemble(cfg.grid, cfg.M, cfg.seed)
    xi = cfg.xi_values(ens)
    return cfg, ens, xi, picard_solve(ens, cfg.driver, xi, cfg.losses, cfg.picard, cfg.regression)


# ---- residuals

def test_inactive_constraints_have_zero_residuals(small_ens, wide_losses):
    sol = picard_solve(small_ens, ZERO, small_ens.W[:, -1], wide_losses)
    assert flatoff_residual(sol, wide_losses, small_ens) == (0.0, 0.0)
    assert constraint_violation(sol, wide_losses, small_ens) == 0.0


def test_hand_flatoff_and_feasibility(mid_ens, hand_losses, hand):
    _, sol = hand
    fR, fL = flatoff_residual(sol, hand_losses, mid_ens)
    assert fR <= 1e-6 * (1 + sol.total_variation)
    assert fL == 0.0
    assert constraint_violation(sol, hand_losses, mid_ens) <= sol.residuals["constraint_tol"]


def test_corrupted_compensator_breaks_constraint(mid_ens, hand_losses, hand):
    _, sol = hand
    bad = dataclasses.replace(sol, Y=sol.Y - 0.1)
    assert constraint_violation(bad, hand_losses, mid_ens) == pytest.approx(0.1, abs=1e-9)


# ---- game value

def test_cone_game_value_is_exactly_zero():
    cfg = parse_scenario(os.path.join(SCEN, "cone.yaml"))
    ens = sample_ensemble(cfg.grid, cfg.M, cfg.seed)
    xi = cfg.xi_values(ens)
    sol = picard_solve(ens, cfg.driver, xi, cfg.losses, cfg.picard, cfg.regression)
    g = dynkin_value(sol, cfg.driver, xi, cfg.losses, ens, 0, cfg.regression)
    assert abs(g.supinf) <= 1e-10 and abs(g.infsup) <= 1e-10


@pytest.mark.parametrize("t", [0.0, 0.5])
def test_hand_game_matches_mean(mid_ens, hand_losses, hand, t):
    xi, sol = hand
    g = dynkin_value(sol, ZERO, xi, hand_losses, mid_ens, mid_ens.grid.index_of(t))
    assert g.consistent and g.ordering_ok
    assert g.supinf == pytest.approx(max(1 - 2 * t, 0.0), abs=0.02)


@pytest.mark.parametrize("t", [0.0, 0.5])
def test_nonlinear_game_matches_mean(nonlinear, t):
    cfg, ens, xi, sol = nonlinear
    g = dynkin_value(sol, cfg.driver, xi, cfg.losses, ens, ens.grid.index_of(t), cfg.regression)
    assert abs(g.supinf - g.infsup) <= 2 * g.tol_game
    assert abs(g.supinf - g.meanY) <= g.tol_game


def test_game_rejects_bad_index(mid_ens, hand_losses, hand):
    xi, sol = hand
    with pytest.raises(ValueError):
        dynkin_value(sol, ZERO, xi, hand_losses, mid_ens, mid_ens.grid.N + 1)


# ---- sandwich

def test_tightened_sandwich_holds(mid_ens, hand_losses):
    res = sandwich_check(mid_ens, ZERO, mid_ens.W[:, -1], hand_losses, construction="tightened",
                         margins=(0.9, 0.3))
    assert res.status == "holds", res.witness
    assert res.witness["min_full_minus_lower"] >= -1e-6
    assert res.witness["min_upper_minus_full"] >= -1e-6


def test_one_sided_sandwich_not_applicable_on_hand(mid_ens, hand_losses):
    res = sandwich_check(mid_ens, ZERO, mid_ens.W[:, -1], hand_losses)
    assert res.status == "not-applicable"
    assert res.witness["candidate"] in ("lower", "upper")


def test_sandwich_collapses_when_inactive(small_ens, wide_losses):
    res = sandwich_check(small_ens, ZERO, small_ens.W[:, -1], wide_losses)
    assert res.status == "holds"
    assert np.array_equal(res.lower.Y, res.full.Y) and np.array_equal(res.upper.Y, res.full.Y)


def test_sandwich_needs_linear_in_y_driver(small_ens, hand_losses):
    drv = DriverSpec("lipschitz", lam1=0.3, lam2=0.2, T=1.0)
    with pytest.raises(ConfigError):
        sandwich_check(small_ens, drv, small_ens.W[:, -1], hand_losses)


def test_sandwich_rejects_unknown_construction(small_ens, hand_losses):
    with pytest.raises(ConfigError, match="one_sided"):
        sandwich_check(small_ens, ZERO, small_ens.W[:, -1], hand_losses, construction="both")


# ---- stability of the backward map

def affine(shift):
    return BoundaryFn(lambda t, x: x - shift(t), (1.0, 1.0))


def base_instance(n=51):
    times = np.linspace(0.0, 1.0, n)
    return BackwardInstance(s=0.8 * np.sin(3 * times), a=0.0, l=affine(lambda t: 0.5),
                            r=affine(lambda t: 0.4 - t), times=times)


def test_bound_formula():
    assert stability_bound(1.0, 2.0, 0.1, 0.2, 0.3, 0.05) == pytest.approx(0.4 + 1.6 + 0.6)


def test_zero_perturbation_has_zero_lhs():
    res = stability_check(base_instance(), trials=5, zero=True)
    assert all(t.lhs == 0.0 and t.rhs == 0.0 for t in res.trials)
    assert res.min_slack == 0.0 and res.ok


def test_randomized_stability_has_nonnegative_slack():
    res = stability_check(base_instance(), trials=60, seed=3)
    assert res.ok and res.min_slack >= 0
    assert res.allowance == pytest.approx(4e-10)


def test_anchor_shift_with_inactive_band_has_zero_lhs():
    times = np.linspace(0.0, 1.0, 21)
    base = BackwardInstance(s=np.zeros(21), a=0.0, l=affine(lambda t: 5.0), r=affine(lambda t: -5.0), times=times)
    res = stability_check(base, trials=10, kinds=("a",))
    assert all(t.lhs == 0.0 for t in res.trials)


def test_induced_affine_boundary_has_unit_band(small_ens, hand_losses):
    sol = picard_solve(small_ens, ZERO, small_ens.W[:, -1], hand_losses)
    X = sol.Y - (sol.K[-1] - sol.K)[None, :]
    l = induced_boundary(X, hand_losses.L, small_ens)
    assert l.band == (1.0, 1.0)


# ---- report

def test_report_fields(mid_ens, hand_losses, hand):
    xi, sol = hand
    rep = build_report(sol, ZERO, xi, hand_losses, mid_ens).to_dict()
    for key in ("flatoff_R", "flatoff_L", "violation_sup", "constraint_tol", "game_value_supinf",
                "game_value_infsup", "meanY_at_t", "tol_game", "sandwich_ok", "stability_margin"):
        assert key in rep
    assert rep["sandwich_ok"] == "not-applicable"
    assert abs(rep["game_value_supinf"] - rep["meanY_at_t"]) <= rep["tol_game"]


def test_linear_obstacles_as_losses_agree_with_cone_solution(mid_ens):
    obs = LinearObstacles(TimeFn.poly([0.0, -1.0]), TimeFn.poly([0.0, 1.0]))
    sol = picard_solve(mid_ens, ZERO, 1.0 + mid_ens.W[:, -1], obs.as_losses())
    t = mid_ens.grid.times
    # the upper obstacle binds everywhere before T
    np.testing.assert_allclose(sol.meanY[:-1], t[:-1], atol=1e-8)
