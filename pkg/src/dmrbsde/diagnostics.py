"""Cross-checks of mean-reflected solutions.

* flat-off residuals and constraint violations,
* the deterministic-time game value, which must equal ``E[Y_t]``,
* ordering against one-sided problems,
* the compensator stability estimate of the backward Skorokhod map.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from dmrbsde._parallel import pmap
from dmrbsde.boundaries import InducedBoundary, LossPair, mean_loss, sentinel_loss
from dmrbsde.condexp import RegressionSpec, regress_condexp
from dmrbsde.dmr import PicardConfig, constraint_tolerance, picard_solve, standard_error
from dmrbsde.errors import ConfigError
from dmrbsde.grid import tree_mean
from dmrbsde.skorokhod import EPS_ROOT_INDUCED, boundary_root, solve_backward_sp


def flatoff_residual(sol, losses, ensemble):
    """``(|sum_k E[R(Y_k)] dK_R_k|, |sum_k E[L(Y_k)] dK_L_k|)`` with left-endpoint loss values."""
    ER = mean_loss(losses.R, sol.Y, ensemble)
    EL = mean_loss(losses.L, sol.Y, ensemble)
    return float(abs(np.sum(ER[:-1] * np.diff(sol.K_R)))), float(abs(np.sum(EL[:-1] * np.diff(sol.K_L))))


def constraint_violation(sol, losses, ensemble):
    """``sup_k max(E[L(Y_k)]^+, E[R(Y_k)]^-)``."""
    EL = mean_loss(losses.L, sol.Y, ensemble)
    ER = mean_loss(losses.R, sol.Y, ensemble)
    return float(np.max(np.maximum(np.maximum(EL, 0.0), np.maximum(-ER, 0.0))))


# deterministic-time game

@dataclass
class GameResult:
    t_index: int
    supinf: float
    infsup: float
    meanY: float
    tol_game: float
    rbar: np.ndarray = field(repr=False)
    lbar: np.ndarray = field(repr=False)
    ordering_ok: bool = True
    ordering_slack: float = 0.0

    @property
    def consistent(self):
        return (abs(self.supinf - self.infsup) <= 2 * self.tol_game
                and abs(self.supinf - self.meanY) <= self.tol_game)


def dynkin_value(sol, driver, xi, losses, ensemble, t_index, spec=RegressionSpec(), eps_root=EPS_ROOT_INDUCED):
    """Exhaustive sup-inf / inf-sup of the payoff ``R_t(s, q)`` over grid times ``s, q >= t``.

    ``R_t(s, q) = E[int_t^{s^q} f + xi 1{s^q = T}] + rbar_q 1{q < T, q <= s} + lbar_s 1{s < q}``
    where ``rbar``, ``lbar`` are the roots of the boundaries induced by ``R``
    and ``L`` from ``Ybar_k = E_k[xi + int_k^T f]``.
    """
    grid = ensemble.grid
    N, dt, times = grid.N, grid.dt, grid.times
    t = int(t_index)
    if not 0 <= t <= N:
        raise ValueError(f"time index {t} outside [0, {N}]")
    xi = np.asarray(xi, dtype=float)
    F = driver(times[None, :-1], sol.Y[:, :-1], sol.Z[:, :-1]) * dt
    tail = np.zeros((ensemble.M, N + 1))
    tail[:, :-1] = np.cumsum(F[:, ::-1], axis=1)[:, ::-1]
    G = xi[:, None] + tail
    Ybar = np.column_stack(pmap(lambda k: regress_condexp(ensemble, G[:, k], k, spec), range(N + 1)))
    rb = InducedBoundary(Ybar, losses.R, ensemble)
    lb = InducedBoundary(Ybar, losses.L, ensemble)
    rbar = np.array(pmap(lambda k: boundary_root(rb, times[k], eps_root), range(N + 1)))
    lbar = np.array(pmap(lambda k: boundary_root(lb, times[k], eps_root), range(N + 1)))

    # E-term as a function of m = s ^ q
    run = np.zeros((ensemble.M, N + 1))
    run[:, t + 1:] = np.cumsum(F[:, t:], axis=1)
    E = tree_mean(run)
    E[N] += float(tree_mean(xi))
    idx = np.arange(t, N + 1)
    S, Q = np.meshgrid(idx, idx, indexing="ij")
    payoff = E[np.minimum(S, Q)]
    payoff = payoff + np.where((Q < N) & (Q <= S), rbar[Q], 0.0) + np.where(S < Q, lbar[S], 0.0)
    supinf = float(np.max(np.min(payoff, axis=0)))
    infsup = float(np.min(np.max(payoff, axis=1)))

    meanY = tree_mean(sol.Y)
    c, _ = losses.band
    se = standard_error(G[:, t])
    drift = float(np.max(np.abs(tree_mean(F)))) if N > 0 else 0.0
    tol_game = eps_root / c + 3.0 * se + drift
    slack = float(min(np.min(meanY - rbar), np.min(lbar - meanY)))
    return GameResult(t_index=t, supinf=supinf, infsup=infsup, meanY=float(meanY[t]), tol_game=tol_game,
                      rbar=rbar, lbar=lbar, ordering_ok=slack >= -tol_game, ordering_slack=slack)


# ordering against one-sided problems

@dataclass
class SandwichResult:
    status: str
    witness: dict
    lower: object = field(repr=False, default=None)
    full: object = field(repr=False, default=None)
    upper: object = field(repr=False, default=None)


def _shift_obstacle(loss, delta):
    return type(loss)(loss.kind, loss.obstacle.plus(delta), loss.alpha, loss.feature, loss.kappa, loss.declared_band)


def sandwich_check(ensemble, driver, xi, losses, picard=PicardConfig(), spec=RegressionSpec(),
                   construction="one_sided", margins=(0.0, 0.0), eps_root=EPS_ROOT_INDUCED, order_tol=1e-6):
    """Tri-state check of ``Y_lower <= Y <= Y_upper`` path by path.

    ``construction="one_sided"`` drops one constraint at a time (the dropped
    side becomes a never-binding sentinel). ``"tightened"`` keeps both sides
    but moves the dropped one inward by ``margins = (dL, dR)``: the lower
    candidate uses ``L + dL``, the upper ``R - dR``. Each candidate must still
    satisfy the constraint it relaxes up to ``eps_root (1 + C/c)``;
    otherwise the result is ``not-applicable`` with the breach as witness.
    """
    if driver.linear_in_y() is None:
        raise ConfigError("sandwich check needs a driver of the form a(t) y + h(t, z)")
    if construction == "one_sided":
        low_losses = LossPair(sentinel_loss("upper"), losses.R, losses.gap)
        up_losses = LossPair(losses.L, sentinel_loss("lower"), losses.gap)
    elif construction == "tightened":
        dL, dR = margins
        if not (dL > 0 and dR > 0):
            raise ConfigError("tightened construction needs positive margins (dL, dR)")
        low_losses = LossPair(_shift_obstacle(losses.L, -dL), losses.R, losses.gap)
        up_losses = LossPair(losses.L, _shift_obstacle(losses.R, dR), losses.gap)
    else:
        raise ConfigError(f"unknown sandwich construction {construction!r}; available: one_sided, tightened")

    full = picard_solve(ensemble, driver, xi, losses, picard, spec, eps_root)
    lower = picard_solve(ensemble, driver, xi, low_losses, picard, spec, eps_root)
    upper = picard_solve(ensemble, driver, xi, up_losses, picard, spec, eps_root)
    # the candidates' means are exact functions of the ensemble, so the
    # omitted constraint is checked at root precision, not at MC precision
    c, C = losses.band
    tol = eps_root * (1.0 + C / c)
    times = ensemble.grid.times

    EL_low = mean_loss(losses.L, lower.Y, ensemble)
    ER_up = mean_loss(losses.R, upper.Y, ensemble)
    k_low, k_up = int(np.argmax(EL_low)), int(np.argmin(ER_up))
    if EL_low[k_low] > tol:
        return SandwichResult("not-applicable", {"candidate": "lower", "constraint": "E[L] <= 0",
                                                 "t": float(times[k_low]), "value": float(EL_low[k_low]),
                                                 "tol": tol}, lower, full, upper)
    if ER_up[k_up] < -tol:
        return SandwichResult("not-applicable", {"candidate": "upper", "constraint": "E[R] >= 0",
                                                 "t": float(times[k_up]), "value": float(ER_up[k_up]),
                                                 "tol": tol}, lower, full, upper)

    coupling = 0.0
    if driver.depends_on_state:
        coupling = np.sqrt(picard.tol) * (1.0 + ensemble.grid.T)
    otol = order_tol + coupling
    gap_low = full.Y - lower.Y
    gap_up = upper.Y - full.Y
    worst_low = np.unravel_index(int(np.argmin(gap_low)), gap_low.shape)
    worst_up = np.unravel_index(int(np.argmin(gap_up)), gap_up.shape)
    witness = {
        "min_full_minus_lower": float(gap_low[worst_low]),
        "min_upper_minus_full": float(gap_up[worst_up]),
        "order_tol": otol,
        "max_upper_minus_full": float(np.max(gap_up)),
        "max_full_minus_lower": float(np.max(gap_low)),
    }
    if gap_low[worst_low] < -otol:
        witness.update(side="lower", path=int(worst_low[0]), t=float(times[worst_low[1]]))
        return SandwichResult("violated", witness, lower, full, upper)
    if gap_up[worst_up] < -otol:
        witness.update(side="upper", path=int(worst_up[0]), t=float(times[worst_up[1]]))
        return SandwichResult("violated", witness, lower, full, upper)
    return SandwichResult("holds", witness, lower, full, upper)


# stability of the backward Skorokhod map

@dataclass
class BackwardInstance:
    s: np.ndarray
    a: float
    l: object
    r: object
    times: np.ndarray

    def band(self):
        cl, Cl = self.l.band
        cr, Cr = self.r.band
        return min(cl, cr), max(Cl, Cr)


@dataclass
class StabilityTrial:
    lhs: float
    rhs: float
    slack: float
    da: float
    ds: float
    dlr: float


@dataclass
class StabilityResult:
    min_slack: float
    trials: list = field(repr=False)
    allowance: float = 0.0

    @property
    def ok(self):
        return self.min_slack >= 0.0


def stability_bound(c, C, da, ds, dl, dr):
    return 2 * (C / c) * abs(da) + 4 * (C / c) * ds + (2 / c) * max(dl, dr)


def _random_pl(rng, times, scale, knots=5):
    tk = np.linspace(times[0], times[-1], knots)
    return np.interp(times, tk, rng.uniform(-scale, scale, knots))


def stability_check(base, trials=200, scale=0.2, seed=0, eps_root=1e-10, zero=False, kinds=("a", "s", "l", "r")):
    """Randomized check of ``sup|k1 - k2| <= 2(C/c)|da| + 4(C/c) sup|ds| + (2/c) max(sup|dl|, sup|dr|)``.

    Boundary perturbations are piecewise-linear in time and enter as
    ``l(t, x) + dl(t)``. Trials whose perturbed anchor is inadmissible are
    redrawn. Returns the smallest slack ``rhs - lhs``; ``allowance`` is the
    root-finding error budget ``4 eps_root / c`` reported alongside.
    """
    rng = np.random.default_rng(seed)
    times = np.asarray(base.times, dtype=float)
    c, C = base.band()
    ref = solve_backward_sp(base.s, base.a, base.l, base.r, times, eps_root)
    out = []
    attempts = 0
    while len(out) < trials:
        attempts += 1
        if attempts > 50 * trials:
            raise RuntimeError("could not draw admissible perturbations; reduce the perturbation scale")
        z = np.zeros_like(times)
        da = 0.0 if zero or "a" not in kinds else rng.uniform(-scale, scale)
        ds = z if zero or "s" not in kinds else _random_pl(rng, times, scale)
        dl = z if zero or "l" not in kinds else _random_pl(rng, times, scale)
        dr = z if zero or "r" not in kinds else _random_pl(rng, times, scale)
        l2 = base.l.shifted(lambda t, dl=dl: float(np.interp(t, times, dl)))
        r2 = base.r.shifted(lambda t, dr=dr: float(np.interp(t, times, dr)))
        a2 = base.a + da
        if l2(times[-1], a2) > 0 or r2(times[-1], a2) < 0:
            continue
        try:
            sol = solve_backward_sp(base.s + ds, a2, l2, r2, times, eps_root)
        except Exception:
            continue
        lhs = float(np.max(np.abs(sol.k - ref.k)))
        rhs = stability_bound(c, C, da, float(np.max(np.abs(ds))), float(np.max(np.abs(dl))),
                              float(np.max(np.abs(dr))))
        out.append(StabilityTrial(lhs=lhs, rhs=rhs, slack=rhs - lhs, da=da, ds=float(np.max(np.abs(ds))),
                                  dlr=float(max(np.max(np.abs(dl)), np.max(np.abs(dr))))))
    return StabilityResult(min_slack=min(t.slack for t in out), trials=out, allowance=4 * eps_root / c)


# report

@dataclass
class DiagnosticsReport:
    flatoff_R: float
    flatoff_L: float
    violation_sup: float
    constraint_tol: float
    game_value_supinf: float = float("nan")
    game_value_infsup: float = float("nan")
    meanY_at_t: float = float("nan")
    tol_game: float = float("nan")
    sandwich_ok: str = "not-applicable"
    stability_margin: float = float("nan")

    def to_dict(self):
        return asdict(self)


def build_report(sol, driver, xi, losses, ensemble, spec=RegressionSpec(), t_index=0, eps_root=EPS_ROOT_INDUCED,
                 sandwich=None, stability=None):
    fR, fL = flatoff_residual(sol, losses, ensemble)
    game = dynkin_value(sol, driver, xi, losses, ensemble, t_index, spec, eps_root)
    return DiagnosticsReport(
        flatoff_R=fR, flatoff_L=fL,
        violation_sup=constraint_violation(sol, losses, ensemble),
        constraint_tol=constraint_tolerance(sol.Y, losses, ensemble, eps_root),
        game_value_supinf=game.supinf, game_value_infsup=game.infsup, meanY_at_t=game.meanY,
        tol_game=game.tol_game,
        sandwich_ok=sandwich.status if sandwich is not None else "not-applicable",
        stability_margin=stability.min_slack if stability is not None else float("nan"),
    )
