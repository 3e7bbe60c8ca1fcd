import numpy as np
import pytest
from hypothesis import given, strategies as st

from dmrbsde.boundaries import (
    LossFn,
    LossPair,
    TimeFn,
    eval_loss,
    induced_boundary,
    loss_boundary,
    mean_loss,
    verify_band,
)
from dmrbsde.condexp import gaussian_expectation
from dmrbsde.errors import ConfigError, InvariantViolation, NumericError
from dmrbsde.skorokhod import BoundaryFn


def test_time_functions():
    assert TimeFn.constant(2.0)(0.3) == 2.0
    pl = TimeFn.piecewise_linear([[0, 0], [1, 2]])
    assert pl(0.25) == pytest.approx(0.5)
    assert TimeFn.poly([1.0, -2.0])(0.5) == pytest.approx(0.0)
    assert pl.plus(1.0)(0.5) == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        TimeFn("spline", [1, 2])
    with pytest.raises(ConfigError):
        TimeFn.piecewise_linear([[0, 0], [0, 1]])


def test_identity_loss():
    loss = LossFn.affine(TimeFn.constant(0.0))
    assert eval_loss(loss, 0.0, 0.4, 1.7) == 1.7


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_tanh_warp_slope_in_band(x, y):
    loss = LossFn.tanh_warp(0.5, TimeFn.constant(0.0))
    if abs(x - y) < 1e-6:
        return
    slope = (loss.base(0.0, y) - loss.base(0.0, x)) / (y - x)
    assert 1.0 - 1e-12 <= slope <= 1.5 + 1e-12
    assert loss.band == (1.0, 1.5)


def test_shift_is_additive():
    loss = LossFn.affine(TimeFn.constant(0.0), feature="brownian", kappa=1.0)
    assert eval_loss(loss, 0.7, 0.5, 1.0) - eval_loss(loss, 0.2, 0.5, 1.0) == pytest.approx(0.5)


def test_bad_warp_rejected():
    with pytest.raises(ConfigError):
        LossFn.tanh_warp(1.0, TimeFn.constant(0.0))
    with pytest.raises(ConfigError):
        LossFn("cubic", TimeFn.constant(0.0))


def test_affine_induced_boundary_ignores_process(small_ens):
    rng = np.random.default_rng(0)
    S = rng.normal(size=(small_ens.M, small_ens.grid.N + 1)) * 5
    loss = LossFn.affine(TimeFn.poly([0.5, 1.0]))
    b = induced_boundary(S, loss, small_ens)
    for k in (0, 7, 50):
        t = small_ens.grid.times[k]
        assert b(t, 0.3) == 0.3 - (0.5 + t)


def test_constant_process_gives_plain_loss(small_ens):
    loss = LossFn.tanh_warp(0.5, TimeFn.constant(0.2))
    S = np.full((small_ens.M, small_ens.grid.N + 1), 4.0)
    b = induced_boundary(S, loss, small_ens)
    assert b(0.5, 0.7) == pytest.approx(float(loss.base(0.5, 0.7)), abs=1e-14)


def test_tanh_induced_boundary_matches_quadrature(mid_ens):
    # x = 0 at t = 1 with S = B: mean of G + 0.5 tanh(G) for centered G ~ N(0, 1)
    loss = LossFn.tanh_warp(0.5, TimeFn.constant(0.0))
    b = induced_boundary(mid_ens.W, loss, mid_ens)
    exact = gaussian_expectation(lambda u: u + 0.5 * np.tanh(u), 0.0, 1.0)
    assert exact == pytest.approx(0.0, abs=1e-14)
    centered = mid_ens.W[:, -1] - mid_ens.W[:, -1].mean()
    se = np.std(centered + 0.5 * np.tanh(centered)) / np.sqrt(mid_ens.M)
    assert abs(b(1.0, 0.0) - exact) <= 4 * se


def test_non_finite_process_rejected(small_ens):
    S = np.zeros((small_ens.M, small_ens.grid.N + 1))
    S[3, 4] = np.nan
    with pytest.raises(NumericError):
        induced_boundary(S, LossFn.affine(TimeFn.constant(0.0)), small_ens)


def test_induced_band_is_preserved(small_ens):
    loss = LossFn.tanh_warp(0.5, TimeFn.constant(0.1), feature="abs_brownian", kappa=0.3)
    b = induced_boundary(small_ens.W * 2, loss, small_ens)
    rep = verify_band(b, small_ens.grid.times, n_samples=150)
    assert rep.min_slope >= 1.0 - 1e-9 and rep.max_slope <= 1.5 + 1e-9


def test_verify_band_affine_margins_exact():
    b = loss_boundary(LossFn.affine(TimeFn.constant(0.3)))
    rep = verify_band(b, np.linspace(0, 1, 11))
    assert rep.min_slope == pytest.approx(1.0) and rep.max_slope == pytest.approx(1.0)


def test_verify_band_catches_misdeclared_band():
    b = BoundaryFn(lambda t, x: 2.0 * x, (1.0, 1.5))
    with pytest.raises(InvariantViolation) as info:
        verify_band(b, np.linspace(0, 1, 5))
    assert info.value.witness is not None


def test_pair_separation():
    L = LossFn.tanh_warp(0.5, TimeFn.constant(0.5))
    R = LossFn.tanh_warp(0.5, TimeFn.constant(0.0))
    pair = LossPair(L, R, gap=0.5)
    assert pair.separation(np.linspace(0, 1, 5)) == pytest.approx(0.5)
    rep = verify_band(loss_boundary(L), np.linspace(0, 1, 5), partner=loss_boundary(R), gap=0.5)
    assert rep.min_separation == pytest.approx(0.5)
    with pytest.raises(InvariantViolation):
        verify_band(loss_boundary(L), np.linspace(0, 1, 5), partner=loss_boundary(R), gap=0.6)


def test_mean_loss_with_shift(small_ens):
    loss = LossFn.affine(TimeFn.constant(0.0), feature="brownian", kappa=2.0)
    Y = np.zeros((small_ens.M, small_ens.grid.N + 1))
    np.testing.assert_allclose(mean_loss(loss, Y, small_ens), 2.0 * small_ens.W.mean(axis=0), atol=1e-13)
