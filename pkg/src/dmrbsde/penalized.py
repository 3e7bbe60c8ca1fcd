"""Penalized mean-field scheme for linear obstacles ``l_t <= E[Y_t] <= r_t``.

Backward Euler on the ensemble: regress ``Y_{k+1}``, add the driver, then
move the whole ensemble by the deterministic amount that solves the implicit
penalty equation for its mean. The penalty intensity is ``n``; as ``n`` grows
the solution approaches the mean-reflected one.
"""

from dataclasses import dataclass, field

import numpy as np

from dmrbsde.boundaries import LossFn, LossPair, TimeFn
from dmrbsde.condexp import RegressionSpec, projector
from dmrbsde.errors import AdmissibilityError, ConfigError, NumericError
from dmrbsde.grid import tree_mean

INNER_PASSES = 2


@dataclass(frozen=True)
class LinearObstacles:
    """Lower obstacle ``l`` and upper obstacle ``r`` on the mean of ``Y``.

    By default both must vanish at ``t = 0``; ``relax_origin`` admits any
    ``l_0 <= r_0``.
    """

    l: TimeFn
    r: TimeFn
    relax_origin: bool = False

    def on(self, grid):
        return np.asarray(self.l(grid.times), dtype=float), np.asarray(self.r(grid.times), dtype=float)

    def violations(self, grid, xi_mean=None, tol_T=0.0):
        l, r = self.on(grid)
        bad = []
        if np.any(l > r):
            k = int(np.argmax(l - r))
            bad.append(f"l_t <= r_t fails at t={grid.times[k]:.6g}: l={l[k]:.6g}, r={r[k]:.6g}")
        if not self.relax_origin and (l[0] != 0.0 or r[0] != 0.0):
            bad.append(f"obstacles must start at 0 (l_0={l[0]:.6g}, r_0={r[0]:.6g}); set relax_origin to allow offsets")
        if xi_mean is not None:
            if l[-1] > xi_mean + tol_T:
                bad.append(f"l_T <= E[xi] fails: l_T={l[-1]:.6g}, E[xi]={xi_mean:.6g} (tol {tol_T:.3g})")
            if r[-1] < xi_mean - tol_T:
                bad.append(f"E[xi] <= r_T fails: r_T={r[-1]:.6g}, E[xi]={xi_mean:.6g} (tol {tol_T:.3g})")
        return bad

    def validate(self, grid, xi_mean=None, tol_T=0.0):
        bad = self.violations(grid, xi_mean, tol_T)
        if bad:
            raise AdmissibilityError(bad)

    def as_losses(self):
        """Affine loss pair expressing the same constraints: ``L = y - r``, ``R = y - l``."""
        return LossPair(L=LossFn.affine(self.r), R=LossFn.affine(self.l), gap=0.0)

    def describe(self):
        return {"l": self.l.describe(), "r": self.r.describe(), "relax_origin": self.relax_origin}


@dataclass
class PenalizedSolution:
    Y: np.ndarray = field(repr=False)
    Z: np.ndarray = field(repr=False)
    K_l: np.ndarray = field(repr=False)
    K_r: np.ndarray = field(repr=False)
    meanY: np.ndarray = field(repr=False)
    l: np.ndarray = field(repr=False)
    r: np.ndarray = field(repr=False)
    n: float
    penetration: tuple

    @property
    def K(self):
        return self.K_l - self.K_r


def implicit_penalty_step(ytilde, l, r, ndt):
    """Solve ``y = ytilde + ndt (y - l)^- - ndt (y - r)^+`` for ``y``."""
    if ytilde < l:
        return (ytilde + ndt * l) / (1.0 + ndt)
    if ytilde > r:
        return (ytilde + ndt * r) / (1.0 + ndt)
    return ytilde


def _backward_euler(ensemble, driver, xi, spec, n=None, l=None, r=None):
    grid = ensemble.grid
    N, dt, times = grid.N, grid.dt, grid.times
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise NumericError("non-finite terminal values")
    Y = np.empty((ensemble.M, N + 1))
    Z = np.empty((ensemble.M, N + 1))
    Y[:, N] = xi
    push_l = np.zeros(N)
    push_r = np.zeros(N)
    use_driver = driver.kind != "zero"
    for k in range(N - 1, -1, -1):
        P = projector(ensemble, k, spec)
        cond = P.fit(Y[:, k + 1])
        Z[:, k] = P.fit((Y[:, k + 1] - cond) * ensemble.dW[:, k]) / dt
        Yt = cond
        if use_driver:
            for _ in range(INNER_PASSES):
                Yt = cond + driver(times[k], Yt, Z[:, k]) * dt
        if n is None:
            Y[:, k] = Yt
        else:
            ybar = float(tree_mean(Yt))
            y = implicit_penalty_step(ybar, l[k], r[k], n * dt)
            Y[:, k] = Yt if y == ybar else Yt + (y - ybar)
            push_l[k] = n * dt * max(l[k] - y, 0.0)
            push_r[k] = n * dt * max(y - r[k], 0.0)
        if not np.all(np.isfinite(Y[:, k])):
            raise NumericError(f"non-finite values at index {k}", witness=(k,))
    Z[:, N] = Z[:, N - 1]
    return Y, Z, push_l, push_r


def unreflected_solve(ensemble, driver, xi, spec=RegressionSpec()):
    """Regression backward-Euler solution without constraints; returns ``(Y, Z)``."""
    Y, Z, _, _ = _backward_euler(ensemble, driver, xi, spec)
    return Y, Z


def penalized_solve(ensemble, driver, xi, obstacles, n, spec=RegressionSpec()):
    if not n >= 0:
        raise ConfigError(f"penalty parameter must be >= 0, got {n!r}")
    grid = ensemble.grid
    xi = np.asarray(xi, dtype=float)
    from dmrbsde.dmr import terminal_tolerance

    obstacles.validate(grid, float(tree_mean(xi)), terminal_tolerance(xi, obstacles.as_losses(), ensemble))
    l, r = obstacles.on(grid)
    Y, Z, push_l, push_r = _backward_euler(ensemble, driver, xi, spec, float(n), l, r)
    K_l = np.concatenate([[0.0], np.cumsum(push_l)])
    K_r = np.concatenate([[0.0], np.cumsum(push_r)])
    meanY = tree_mean(Y)
    dt = grid.dt
    pen_l = float(np.sum(np.maximum(l[:-1] - meanY[:-1], 0.0) ** 2) * dt)
    pen_r = float(np.sum(np.maximum(meanY[:-1] - r[:-1], 0.0) ** 2) * dt)
    return PenalizedSolution(Y=Y, Z=Z, K_l=K_l, K_r=K_r, meanY=meanY, l=l, r=r, n=float(n),
                             penetration=(pen_l, pen_r))


def _loglog_slope(ns, vals):
    ns, vals = np.asarray(ns, dtype=float), np.asarray(vals, dtype=float)
    keep = vals > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(ns[keep]), np.log(vals[keep]), 1)[0])


@dataclass
class SweepResult:
    rows: list
    slope_r: float
    slope_l: float
    cauchy: list
    reference_meanY: np.ndarray = field(repr=False)
    solutions: list = field(repr=False, default_factory=list)

    columns = ("n", "pen_l", "pen_r", "dist_to_ref", "supY2", "intZ2")

    def table(self):
        return np.array([[row[c] for c in self.columns] for row in self.rows])


def convergence_sweep(ensemble, driver, xi, obstacles, n_list, spec=RegressionSpec(), reference=None,
                      picard=None, keep_solutions=False):
    """Penalized solves over increasing ``n_list`` against a mean-reflected reference.

    The reference defaults to the Picard solution with the affine losses
    equivalent to ``obstacles`` on the same ensemble.
    """
    n_list = [float(n) for n in n_list]
    if len(n_list) < 2 or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigError(f"n_list must be increasing with at least two entries, got {n_list}")
    if reference is None:
        from dmrbsde.dmr import PicardConfig, picard_solve

        reference = picard_solve(ensemble, driver, xi, obstacles.as_losses(), picard or PicardConfig(), spec)
    ref_mean = reference.meanY if hasattr(reference, "meanY") else np.asarray(reference, dtype=float)
    dt = ensemble.grid.dt
    rows, sols, cauchy = [], [], []
    prev = None
    for n in n_list:
        sol = penalized_solve(ensemble, driver, xi, obstacles, n, spec)
        rows.append({
            "n": n,
            "pen_l": sol.penetration[0],
            "pen_r": sol.penetration[1],
            "dist_to_ref": float(np.max(np.abs(sol.meanY - ref_mean))),
            "supY2": float(np.max(tree_mean(sol.Y ** 2))),
            "intZ2": float(np.sum(tree_mean(sol.Z[:, :-1] ** 2)) * dt),
        })
        if prev is not None:
            cauchy.append(float(np.max(tree_mean((sol.Y - prev.Y) ** 2))))
        prev = sol
        if keep_solutions:
            sols.append(sol)
    return SweepResult(rows=rows, slope_r=_loglog_slope(n_list, [r["pen_r"] for r in rows]),
                       slope_l=_loglog_slope(n_list, [r["pen_l"] for r in rows]), cauchy=cauchy,
                       reference_meanY=ref_mean, solutions=sols)


def stability_constant(ensemble, first, second, obstacles, spec=RegressionSpec(), picard=None):
    """Empirical constant in ``|dY|^2 + |dZ|^2 <= C (|dxi|^2 + |df|^2)`` for two data pairs.

    ``first`` and ``second`` are ``(xi, driver)`` pairs; both problems are
    solved with the mean-reflected solver on the same ensemble and the driver
    difference is measured along the first solution.
    """
    from dmrbsde.dmr import PicardConfig, picard_solve

    losses = obstacles.as_losses()
    cfg = picard or PicardConfig()
    (xi1, f1), (xi2, f2) = first, second
    s1 = picard_solve(ensemble, f1, xi1, losses, cfg, spec)
    s2 = picard_solve(ensemble, f2, xi2, losses, cfg, spec)
    grid = ensemble.grid
    dt, t = grid.dt, grid.times[:-1][None, :]
    lhs = (np.sum(tree_mean((s1.Y - s2.Y)[:, :-1] ** 2)) + np.sum(tree_mean((s1.Z - s2.Z)[:, :-1] ** 2))) * dt
    df = f1(t, s1.Y[:, :-1], s1.Z[:, :-1]) - f2(t, s1.Y[:, :-1], s1.Z[:, :-1])
    rhs = float(tree_mean((np.asarray(xi1) - np.asarray(xi2)) ** 2)) + float(np.sum(tree_mean(df ** 2)) * dt)
    return float(lhs / rhs) if rhs > 0 else float("nan")
