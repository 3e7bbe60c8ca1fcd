"""Two-sided Skorokhod maps with nonlinear, time-dependent boundaries.

Forward problem: given an input path ``s`` and boundaries ``g`` (upper,
``g(t, x) <= 0``) and ``h`` (lower, ``h(t, x) >= 0``) find ``x = s + k`` with
minimal bounded-variation ``k``. Backward problem: given ``s``, a terminal
anchor ``a`` and boundaries ``l`` (upper) and ``r`` (lower) find
``x_t = a + s_T - s_t + k_T - k_t``; it is solved by time reversal.

All maps work on a uniform grid. Boundary roots are computed once per grid
point and the reflection itself is the O(N) recursion
``k_i = min(phi_i, max(psi_i, k_{i-1}))``; :func:`solve_forward_sp_naive`
evaluates the explicit sup/inf formula in O(N^2) and serves as its oracle.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from dmrbsde._parallel import pmap
from dmrbsde.errors import InfeasibleBoundaries, InvariantViolation, NumericError, TerminalConditionError

EPS_ROOT_ANALYTIC = 1e-10
EPS_ROOT_INDUCED = 1e-8
SENTINEL = 1e9
_RTOL = 4 * np.finfo(float).eps


class BoundaryFn:
    """A map ``(t, x) -> value``, strictly increasing in ``x``.

    ``band = (c, C)`` bounds the slope in ``x`` from below and above.
    ``kind`` is a free tag: ``analytic``, ``induced`` or ``sentinel``.
    """

    def __init__(self, fn, band, kind="analytic", name=""):
        c, C = band
        if not (0 < c <= C < np.inf):
            raise ValueError(f"band must satisfy 0 < c <= C < inf, got {band!r}")
        self.fn = fn
        self.band = (float(c), float(C))
        self.kind = kind
        self.name = name

    def __call__(self, t, x):
        return self.fn(t, x)

    def shifted(self, delta):
        """Boundary ``(t, x) -> b(t, x) + delta(t)``; same band."""
        fn = self.fn
        return BoundaryFn(lambda t, x: fn(t, x) + delta(t), self.band, self.kind, self.name + "+shift")

    def __repr__(self):
        return f"BoundaryFn({self.name or self.kind}, band={self.band})"


def sentinel_upper():
    """Upper boundary that is never active (``x <= 1e9``)."""
    return BoundaryFn(lambda t, x: x - SENTINEL, (1.0, 1.0), kind="sentinel", name="upper-sentinel")


def sentinel_lower():
    """Lower boundary that is never active (``x >= -1e9``)."""
    return BoundaryFn(lambda t, x: x + SENTINEL, (1.0, 1.0), kind="sentinel", name="lower-sentinel")


def boundary_root(b, t, eps_root=EPS_ROOT_ANALYTIC, x0=0.0):
    """Solve ``b(t, x) = 0``.

    The band gives a guaranteed bracket from any start ``x0``:
    ``|x0 - root| <= |b(t, x0)| / c``. Inside it Brent's method is run to
    machine precision; the result must satisfy ``|b(t, x*)| <= eps_root``.
    """
    c = b.band[0]
    v0 = float(b(t, x0))
    if not np.isfinite(v0):
        raise NumericError(f"boundary {b!r} is not finite at t={t}, x={x0}", witness=(t, x0, v0))
    if v0 == 0.0:
        return float(x0)
    # exact arithmetic puts the root within |v0|/c; the margin absorbs rounding in b
    step = abs(v0) / c * (1.0 + 1e-12) + 1e-300
    if v0 > 0:
        lo, hi = x0 - step, x0
        end = float(b(t, lo))
        if end > 0:
            raise InvariantViolation(f"band violated by {b!r}: slope below c={c} on [{lo}, {hi}] at t={t}",
                                     witness=(t, lo, hi, end, v0))
        if end == 0.0:
            return float(lo)
    else:
        lo, hi = x0, x0 + step
        end = float(b(t, hi))
        if end < 0:
            raise InvariantViolation(f"band violated by {b!r}: slope below c={c} on [{lo}, {hi}] at t={t}",
                                     witness=(t, lo, hi, v0, end))
        if end == 0.0:
            return float(hi)
    if not np.isfinite(end):
        raise NumericError(f"boundary {b!r} is not finite at t={t}", witness=(t, lo, hi, end))
    # |b(t, x)| <= C |x - root|, so this absolute tolerance keeps |b| far below eps_root
    xtol = max(1e-3 * eps_root / b.band[1], 1e-300)
    root = brentq(lambda x: b(t, x), lo, hi, xtol=xtol, rtol=_RTOL, maxiter=500)
    val = float(b(t, root))
    if abs(val) > eps_root:
        raise NumericError(f"root of {b!r} at t={t} misses tolerance: |b|={abs(val):.3e} > {eps_root:.1e}",
                           witness=(t, root, val))
    return float(root)


def boundary_roots(b, times, eps_root=EPS_ROOT_ANALYTIC):
    return np.array(pmap(lambda t: boundary_root(b, t, eps_root), times))


def jordan_decompose(k):
    """Minimal Jordan decomposition of a grid path.

    Returns ``(k_up, k_down)``, both starting at 0 and nondecreasing, with
    ``k = k[0] + k_up - k_down`` and ``k_up[-1] + k_down[-1]`` equal to the
    total variation of ``k``.
    """
    k = np.asarray(k, dtype=float)
    d = np.diff(k)
    up = np.zeros_like(k)
    down = np.zeros_like(k)
    np.cumsum(np.maximum(d, 0.0), out=up[1:])
    np.cumsum(np.maximum(-d, 0.0), out=down[1:])
    return up, down


@dataclass
class SkorokhodSolution:
    """Constrained path and compensator on a grid.

    ``k_up`` pushes ``x`` upward (forward ``k^h``, backward ``k^r``);
    ``k_down`` pushes it downward (forward ``k^g``, backward ``k^l``).
    ``upper_at_x``/``lower_at_x`` hold the boundary values along ``x`` and
    ``flatoff_up``/``flatoff_down`` the discrete Stieltjes residuals
    ``sum |active boundary| * d(side compensator)``.
    """

    times: np.ndarray
    s: np.ndarray
    x: np.ndarray
    k: np.ndarray
    k_up: np.ndarray
    k_down: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    direction: str
    a: float = float("nan")
    upper_at_x: np.ndarray = field(default=None, repr=False)
    lower_at_x: np.ndarray = field(default=None, repr=False)
    flatoff_up: float = float("nan")
    flatoff_down: float = float("nan")
    eps_root: float = EPS_ROOT_ANALYTIC

    @property
    def total_variation(self):
        return float(self.k_up[-1] + self.k_down[-1])

    @property
    def eps_flat(self):
        return 10.0 * self.eps_root * max(self.total_variation, 1.0)

    def feasibility(self):
        """Worst boundary breach ``(max upper(t, x), -min lower(t, x))``; both <= 0 when feasible."""
        return float(np.max(self.upper_at_x)), float(-np.min(self.lower_at_x))


def _reflect(phi, psi):
    phi = phi.tolist()
    psi = psi.tolist()
    out = [0.0] * len(phi)
    prev = 0.0
    for i, (p, q) in enumerate(zip(phi, psi)):
        prev = min(p, max(q, prev))
        out[i] = prev
    return np.array(out)


def _as_times(times):
    return np.asarray(getattr(times, "times", times), dtype=float)


def _check_gap(phi, psi, times, tol=1e-12):
    bad = psi - phi > tol * np.maximum(1.0, np.abs(phi))
    if np.any(bad):
        i = int(np.argmax(bad))
        raise InfeasibleBoundaries(
            f"lower boundary root exceeds upper root at t={times[i]:.6g} (psi={psi[i]:.6g} > phi={phi[i]:.6g})",
            witness={"t": float(times[i]), "phi": float(phi[i]), "psi": float(psi[i])},
        )


def _forward_parts(k):
    # initial jump from k(0-) = 0 is booked on the side it pushes
    up, down = jordan_decompose(k)
    return up + max(k[0], 0.0), down + max(-k[0], 0.0)


def _boundary_values(b, times, x):
    return np.array([float(b(t, xi)) for t, xi in zip(times, x)])


def _forward_prepare(s, g, h, times, eps_root):
    times = _as_times(times)
    s = np.asarray(s, dtype=float)
    if s.shape != times.shape:
        raise ValueError("input path and grid have different lengths")
    phi = boundary_roots(g, times, eps_root) - s
    psi = boundary_roots(h, times, eps_root) - s
    _check_gap(phi, psi, times)
    return times, s, phi, psi


def _finish_forward(times, s, k, phi, psi, g, h, eps_root):
    x = s + k
    up, down = _forward_parts(k)
    gx = _boundary_values(g, times, x)
    hx = _boundary_values(h, times, x)
    dup = np.diff(np.concatenate([[0.0], up]))
    ddown = np.diff(np.concatenate([[0.0], down]))
    return SkorokhodSolution(
        times=times, s=s, x=x, k=k, k_up=up, k_down=down, phi=phi, psi=psi, direction="forward",
        upper_at_x=gx, lower_at_x=hx,
        flatoff_up=float(np.sum(np.abs(hx) * dup)), flatoff_down=float(np.sum(np.abs(gx) * ddown)),
        eps_root=eps_root,
    )


def solve_forward_sp(s, g, h, times, eps_root=EPS_ROOT_ANALYTIC):
    """Forward Skorokhod map by the O(N) recursion.

    ``phi = root(g) - s`` caps ``k`` from above and ``psi = root(h) - s``
    from below; ``k_0 = min(phi_0, max(psi_0, 0))`` accounts for an initial
    jump onto the band.
    """
    times, s, phi, psi = _forward_prepare(s, g, h, times, eps_root)
    return _finish_forward(times, s, _reflect(phi, psi), phi, psi, g, h, eps_root)


def naive_compensator(phi, psi):
    """Literal grid evaluation of the explicit sup/inf representation.

    ``k_t = min([-phi_0^-] v sup_{r<=t} psi_r, inf_{u<=t} [phi_u v sup_{r in [u,t]} psi_r])``.
    """
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    k = np.empty_like(phi)
    first = min(phi[0], 0.0)
    for t in range(len(phi)):
        tail_max = np.maximum.accumulate(psi[t::-1])[::-1]
        inner = np.min(np.maximum(phi[:t + 1], tail_max))
        k[t] = min(max(first, tail_max[0]), inner)
    return k


def solve_forward_sp_naive(s, g, h, times, eps_root=EPS_ROOT_ANALYTIC):
    times, s, phi, psi = _forward_prepare(s, g, h, times, eps_root)
    return _finish_forward(times, s, naive_compensator(phi, psi), phi, psi, g, h, eps_root)


def time_reverse(s, a):
    """Reversed input ``s_bar_k = a + s_N - s_{N-k}``."""
    s = np.asarray(s, dtype=float)
    return (a + s[-1]) - s[::-1]


def solve_backward_sp(s, a, l, r, times, eps_root=EPS_ROOT_ANALYTIC, terminal_tol=None):
    """Backward Skorokhod map with upper boundary ``l`` and lower boundary ``r``.

    Requires ``l(T, a) <= tol`` and ``r(T, a) >= -tol`` (``tol`` defaults to
    ``eps_root``). Within that tolerance the anchor is accepted as is, so
    ``k_T - k_T = 0`` and ``x_T = a``.
    """
    times = _as_times(times)
    s = np.asarray(s, dtype=float)
    if s.shape != times.shape:
        raise ValueError("input path and grid have different lengths")
    tol = eps_root if terminal_tol is None else terminal_tol
    T = times[-1]
    lT, rT = float(l(T, a)), float(r(T, a))
    if lT > tol or rT < -tol:
        raise TerminalConditionError(
            f"terminal anchor inadmissible: need l(T,a) <= 0 <= r(T,a), got l={lT:.6g}, r={rT:.6g} (tol {tol:.1e})"
        )
    roots_l = boundary_roots(l, times, eps_root)
    roots_r = boundary_roots(r, times, eps_root)
    base = (a + s[-1]) - s
    phi = roots_l - base
    psi = roots_r - base
    _check_gap(phi, psi, times)
    phibar = phi[::-1].copy()
    psibar = psi[::-1].copy()
    phibar[0] = max(phibar[0], 0.0)
    psibar[0] = min(psibar[0], 0.0)
    kbar = _reflect(phibar, psibar)
    K = kbar[-1] - kbar[::-1]
    x = base + (K[-1] - K)
    up, down = jordan_decompose(K)
    lx = _boundary_values(l, times, x)
    rx = _boundary_values(r, times, x)
    return SkorokhodSolution(
        times=times, s=s, x=x, k=K, k_up=up, k_down=down, phi=phi, psi=psi, direction="backward", a=float(a),
        upper_at_x=lx, lower_at_x=rx,
        flatoff_up=float(np.sum(np.abs(rx[:-1]) * np.diff(up))),
        flatoff_down=float(np.sum(np.abs(lx[:-1]) * np.diff(down))),
        eps_root=eps_root,
    )


def audit_backward(sol, band):
    """Discrete check of the backward definition: identity, feasibility, flat-off.

    Returns a dict of measured residuals and pass flags; ``band = (c, C)``
    sets the feasibility allowance ``eps_root * (1 + C/c)``.
    """
    c, C = band
    a = sol.a
    identity = (a + sol.s[-1]) - sol.s + (sol.k[-1] - sol.k)
    up_breach, low_breach = sol.feasibility()
    feas_tol = sol.eps_root * (1.0 + C / c)
    return {
        "identity_exact": bool(np.array_equal(identity, sol.x)),
        "upper_breach": up_breach,
        "lower_breach": low_breach,
        "feasibility_tol": feas_tol,
        "feasible": up_breach <= feas_tol and low_breach <= feas_tol,
        "flatoff_up": sol.flatoff_up,
        "flatoff_down": sol.flatoff_down,
        "eps_flat": sol.eps_flat,
        "flatoff_ok": sol.flatoff_up <= sol.eps_flat and sol.flatoff_down <= sol.eps_flat,
        "monotone": bool(np.all(np.diff(sol.k_up) >= 0) and np.all(np.diff(sol.k_down) >= 0)),
        "decomposition_error": float(np.max(np.abs(sol.k - (sol.k[0] + sol.k_up - sol.k_down)))),
    }
