"""BSDEs with two mean constraints ``E[L(t, Y_t)] <= 0 <= E[R(t, Y_t)]``.

The constant-coefficient problem (driver values frozen along the paths) is
reduced to a deterministic backward Skorokhod problem for ``E[Y_t]``:

1. ``H = xi + sum_j C_j dt`` (left Riemann sums),
2. ``Xt_k = E_k[xi + sum_{j>=k} C_j dt]`` and ``Z`` from the martingale part,
3. boundaries induced by ``L`` and ``R`` from the centered ``Xt``,
4. the backward Skorokhod map on ``s_k = mean(sum_{j<k} C_j dt)`` anchored at
   ``a = mean(xi)`` gives a deterministic ``K``,
5. ``Y_k = Xt_k + K_N - K_k``.

A Picard loop over the frozen driver values handles general drivers,
optionally on a backward sequence of subintervals.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from dmrbsde.boundaries import InducedBoundary, mean_loss
from dmrbsde.condexp import RegressionSpec, integrand, regress_condexp
from dmrbsde.errors import ConfigError, ConvergenceError, InvariantViolation, TerminalConditionError
from dmrbsde.grid import tree_mean
from dmrbsde.skorokhod import EPS_ROOT_INDUCED, solve_backward_sp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PicardConfig:
    max_iter: int = 30
    tol: float = 1e-8
    subintervals: int = 1

    def __post_init__(self):
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ConfigError(f"picard.max_iter must be a positive integer, got {self.max_iter!r}")
        if not self.tol > 0:
            raise ConfigError(f"picard.tol must be positive, got {self.tol!r}")
        if int(self.subintervals) != self.subintervals or self.subintervals < 1:
            raise ConfigError(f"picard.subintervals must be a positive integer, got {self.subintervals!r}")


@dataclass
class DmrSolution:
    Y: np.ndarray = field(repr=False)
    Z: np.ndarray = field(repr=False)
    K: np.ndarray = field(repr=False)
    K_R: np.ndarray = field(repr=False)
    K_L: np.ndarray = field(repr=False)
    meanY: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)
    EL: np.ndarray = field(repr=False)
    ER: np.ndarray = field(repr=False)
    times: np.ndarray = field(repr=False)
    iterations: int = 1
    residuals: dict = field(default_factory=dict)

    @property
    def total_variation(self):
        return float(self.K_R[-1] + self.K_L[-1])


def standard_error(values):
    """Monte Carlo standard error of the mean of a 1-d sample."""
    v = np.asarray(values, dtype=float)
    m = tree_mean(v)
    return float(np.sqrt(tree_mean((v - m) ** 2) / (len(v) - 1)))


def terminal_tolerance(xi, losses, ensemble):
    """``3 * SE`` of the mean losses at ``T`` (the larger of the two)."""
    T = ensemble.grid.T
    se = 0.0
    for loss in (losses.L, losses.R):
        vals = loss.base(T, xi)
        if loss.has_shift:
            vals = vals + loss.kappa * ensemble.feature(loss.feature)[:, -1]
        se = max(se, standard_error(vals))
    return 3.0 * se


def constraint_tolerance(Y, losses, ensemble, eps_root):
    """``max(eps_root (1 + C/c), 3 * SE)`` with SE the worst per-time loss standard error."""
    c, C = losses.band
    times = ensemble.grid.times
    se = 0.0
    for loss in (losses.L, losses.R):
        vals = loss.base(times[None, :], Y)
        if loss.has_shift:
            vals = vals + loss.kappa * ensemble.feature(loss.feature)
        centered = vals - tree_mean(vals)[None, :]
        se = max(se, float(np.sqrt(np.max(tree_mean(centered ** 2)) / (ensemble.M - 1))))
    return max(eps_root * (1.0 + C / c), 3.0 * se)


def _tail_solve(ensemble, C, terminal, spec, k0, k1):
    """``Xt_k = E_k[terminal + sum_{j>=k} C_j dt]`` and ``Z`` for columns ``k0..k1``.

    The past integral ``sum_{j<k} C_j dt`` depends on the whole path, so it is
    never pushed through the regression; only the tail is projected. The
    martingale is ``M_k = Xt_k + sum_{j<k} C_j dt - mean(H)``.
    """
    dt = ensemble.grid.dt
    n = k1 - k0
    incr = C * dt
    cum = np.zeros((ensemble.M, n + 1))
    np.cumsum(incr, axis=1, out=cum[:, 1:])
    tail = np.zeros((ensemble.M, n + 1))
    tail[:, :-1] = np.cumsum(incr[:, ::-1], axis=1)[:, ::-1]
    tail += terminal[:, None]
    Xt = np.empty_like(tail)
    for j, k in enumerate(range(k0, k1 + 1)):
        Xt[:, j] = regress_condexp(ensemble, tail[:, j], k, spec, measurable_at=k1)
    Mart = Xt + cum - tree_mean(tail[:, 0])
    Z = integrand(ensemble, Mart, spec, k0, k1)
    return Xt, Z, cum


def _window_solve(ensemble, C, terminal, losses, spec, k0, k1, eps_root, terminal_tol):
    """Constant-coefficient solve on columns ``k0..k1``; ``C`` holds columns ``k0..k1-1``."""
    Xt, Z, cum = _tail_solve(ensemble, C, terminal, spec, k0, k1)
    s = tree_mean(cum)
    a = float(tree_mean(terminal))
    l = InducedBoundary(Xt, losses.L, ensemble, offset=k0)
    r = InducedBoundary(Xt, losses.R, ensemble, offset=k0)
    bsp = solve_backward_sp(s, a, l, r, ensemble.grid.times[k0:k1 + 1], eps_root, terminal_tol)
    Y = Xt + (bsp.k[-1] - bsp.k)[None, :]
    return Y, Z, bsp


def _assemble(ensemble, Y, Z, K, K_R, K_L, x, losses, eps_root, iterations, residuals):
    meanY = tree_mean(Y)
    EL = mean_loss(losses.L, Y, ensemble)
    ER = mean_loss(losses.R, Y, ensemble)
    scale = max(1.0, float(np.max(np.abs(x))))
    residuals.update({
        "eps_root": eps_root,
        "identity_error": float(np.max(np.abs(meanY - x)) / scale),
        "flatoff_R": float(abs(np.sum(ER[:-1] * np.diff(K_R)))),
        "flatoff_L": float(abs(np.sum(EL[:-1] * np.diff(K_L)))),
        "constraint_tol": constraint_tolerance(Y, losses, ensemble, eps_root),
        "violation_sup": float(np.max(np.maximum(np.maximum(EL, 0.0), np.maximum(-ER, 0.0)))),
    })
    return DmrSolution(Y=Y, Z=Z, K=K, K_R=K_R, K_L=K_L, meanY=meanY, x=x, EL=EL, ER=ER,
                       times=ensemble.grid.times, iterations=iterations, residuals=residuals)


def check_terminal(xi, losses, ensemble, tol_T):
    """Raise unless ``mean L(T, xi) <= tol_T`` and ``mean R(T, xi) >= -tol_T``."""
    T = ensemble.grid.T
    vals = {}
    for name, loss in (("L", losses.L), ("R", losses.R)):
        v = loss.base(T, xi)
        if loss.has_shift:
            v = v + loss.kappa * ensemble.feature(loss.feature)[:, -1]
        vals[name] = float(tree_mean(v))
    bad = []
    if vals["L"] > tol_T:
        bad.append(f"E[L(T, xi)] <= 0 fails: measured {vals['L']:.6g} (tol {tol_T:.3g})")
    if vals["R"] < -tol_T:
        bad.append(f"E[R(T, xi)] >= 0 fails: measured {vals['R']:.6g} (tol {tol_T:.3g})")
    if bad:
        raise TerminalConditionError(bad)


def solve_constant_coeff(ensemble, C_paths, xi, losses, spec=RegressionSpec(), eps_root=EPS_ROOT_INDUCED):
    """Solve with frozen driver values ``C_paths`` (M x (N+1); the last column is unused)."""
    N = ensemble.grid.N
    xi = np.asarray(xi, dtype=float)
    C_paths = np.asarray(C_paths, dtype=float)
    tol_T = terminal_tolerance(xi, losses, ensemble)
    check_terminal(xi, losses, ensemble, tol_T)
    Y, Z, bsp = _window_solve(ensemble, C_paths[:, :N], xi, losses, spec, 0, N, eps_root, max(tol_T, eps_root))
    return _assemble(ensemble, Y, Z, bsp.k, bsp.k_up, bsp.k_down, bsp.x, losses, eps_root, 1,
                     {"tol_T": tol_T, "delta_trace": []})


def _windows(N, parts):
    if N % parts:
        raise ConfigError(f"picard.subintervals={parts} must divide N={N}")
    step = N // parts
    return [(i * step, (i + 1) * step) for i in range(parts)]


def _delta(Y, U, Z, V, dt):
    dy = float(np.max(tree_mean((Y - U) ** 2)))
    dz = float(np.sum(tree_mean((Z[:, :-1] - V[:, :-1]) ** 2)) * dt)
    return dy + dz


def picard_solve(ensemble, driver, xi, losses, config=PicardConfig(), spec=RegressionSpec(),
                 eps_root=EPS_ROOT_INDUCED, init=None):
    """Picard iteration on the driver values, started from the unreflected solution.

    ``init`` may supply the starting pair ``(U, V)``; by default it is the
    backward-Euler regression solution without constraints.
    """
    from dmrbsde.penalized import unreflected_solve

    grid = ensemble.grid
    N, dt, times = grid.N, grid.dt, grid.times
    xi = np.asarray(xi, dtype=float)
    windows = _windows(N, config.subintervals)
    tol_T = terminal_tolerance(xi, losses, ensemble)
    check_terminal(xi, losses, ensemble, tol_T)
    U, V = unreflected_solve(ensemble, driver, xi, spec) if init is None else init

    Y = np.empty((ensemble.M, N + 1))
    Z = np.empty((ensemble.M, N + 1))
    x = np.empty(N + 1)
    pieces = {}
    traces = []
    converged = True
    iterations = 0
    terminal = xi
    for w, (k0, k1) in reversed(list(enumerate(windows))):
        Uw, Vw = U[:, k0:k1 + 1], V[:, k0:k1 + 1]
        ttol = max(tol_T, eps_root) if k1 == N else eps_root * (1.0 + losses.band[1] / losses.band[0])
        trace = []
        for it in range(1, config.max_iter + 1):
            C = driver(times[k0:k1][None, :], Uw[:, :-1], Vw[:, :-1])
            try:
                Yw, Zw, bsp = _window_solve(ensemble, C, terminal, losses, spec, k0, k1, eps_root, ttol)
            except TerminalConditionError as exc:
                if k1 == N:
                    raise
                raise InvariantViolation(f"inadmissible terminal value at subdivision point t={times[k1]:.6g}: {exc}",
                                         witness=(k1,)) from exc
            trace.append(_delta(Yw, Uw, Zw, Vw, dt))
            Uw, Vw = Yw, Zw
            if not driver.depends_on_state or trace[-1] <= config.tol:
                break
        iterations = max(iterations, it)
        if driver.depends_on_state and trace[-1] > config.tol:
            tail = trace[-4:]
            if len(tail) < 2 or not all(b < a for a, b in zip(tail, tail[1:])):
                raise ConvergenceError(
                    f"Picard iteration did not converge on window {w} after {len(trace)} iterations; "
                    f"delta trace tail {tail}", trace=trace)
            converged = False
            log.warning("Picard stopped at max_iter with delta %.3e > tol %.1e (still decreasing)",
                        trace[-1], config.tol)
        traces.append(trace)
        top = k1 + 1 if k1 == N else k1
        Y[:, k0:top] = Yw[:, :top - k0]
        Z[:, k0:top] = Zw[:, :top - k0]
        x[k0:top] = bsp.x[:top - k0]
        pieces[w] = bsp
        terminal = Yw[:, 0]

    K = np.zeros(N + 1)
    K_R = np.zeros(N + 1)
    K_L = np.zeros(N + 1)
    for w, (k0, k1) in enumerate(windows):
        bsp = pieces[w]
        K[k0:k1 + 1] = K[k0] + bsp.k
        K_R[k0:k1 + 1] = K_R[k0] + bsp.k_up
        K_L[k0:k1 + 1] = K_L[k0] + bsp.k_down
    residuals = {"tol_T": tol_T, "delta_trace": traces[::-1], "converged": converged,
                 "picard_tol": config.tol, "subintervals": config.subintervals}
    return _assemble(ensemble, Y, Z, K, K_R, K_L, x, losses, eps_root, iterations, residuals)


def fixed_k_pass(ensemble, driver, xi, K, spec=RegressionSpec(), max_iter=50, tol=1e-12):
    """Rebuild ``(Y, Z)`` for a given deterministic ``K`` by Picard on the driver values.

    With ``K`` fixed the equation is an ordinary BSDE with terminal value
    ``xi`` and the deterministic push ``K_N - K_k``; used to audit stored solutions.
    """
    grid = ensemble.grid
    N, dt, times = grid.N, grid.dt, grid.times
    K = np.asarray(K, dtype=float)
    zero = np.zeros((ensemble.M, N))
    C = np.broadcast_to(driver(times[:-1][None, :], zero, zero), (ensemble.M, N))
    Y = Z = None
    for _ in range(max_iter):
        Xt, Zn, _ = _tail_solve(ensemble, C, xi, spec, 0, N)
        Yn = Xt + (K[-1] - K)[None, :]
        done = Y is not None and _delta(Yn, Y, Zn, Z, dt) <= tol
        Y, Z = Yn, Zn
        if done or not driver.depends_on_state:
            break
        C = driver(times[:-1][None, :], Y[:, :-1], Z[:, :-1])
    return Y, Z
