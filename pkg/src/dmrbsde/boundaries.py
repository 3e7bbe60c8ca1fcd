"""Loss functions and the deterministic boundaries they induce on an ensemble.

A loss is ``base(t, y) + kappa * eta_t(omega)`` where ``base`` is affine
(``y - u(t)``) or tanh-warped (``y + alpha * tanh(y) - u(t)``, ``|alpha| < 1``)
and ``eta`` is an optional path feature (``B_t`` or ``|B_t|``). Averaging the
loss against a centered process ``S`` gives the boundary

    r^S(t, x) = mean_omega R(t, x + S_t - mean(S_t))

which keeps the per-path slope band and separation.
"""

from dataclasses import dataclass

import numpy as np

from dmrbsde.errors import ConfigError, InvariantViolation, NumericError
from dmrbsde.grid import tree_mean
from dmrbsde.skorokhod import SENTINEL, BoundaryFn


class TimeFn:
    """Deterministic function of time: constant, piecewise linear or polynomial."""

    def __init__(self, kind, data):
        self.kind = kind
        if kind == "constant":
            self.value = float(data)
        elif kind == "piecewise_linear":
            pts = np.asarray(data, dtype=float)
            if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 1:
                raise ConfigError("piecewise_linear obstacle needs a list of [t, value] breakpoints")
            if np.any(np.diff(pts[:, 0]) <= 0):
                raise ConfigError("piecewise_linear breakpoints must have strictly increasing times")
            self.tp, self.vp = pts[:, 0], pts[:, 1]
        elif kind == "poly":
            self.coeffs = np.asarray(data, dtype=float)
            if self.coeffs.ndim != 1 or len(self.coeffs) == 0:
                raise ConfigError("poly obstacle needs a non-empty coefficient list (constant term first)")
        else:
            raise ConfigError(f"unknown obstacle kind {kind!r}; available: constant, piecewise_linear, poly")

    @classmethod
    def constant(cls, v):
        return cls("constant", v)

    @classmethod
    def piecewise_linear(cls, points):
        return cls("piecewise_linear", points)

    @classmethod
    def poly(cls, coeffs):
        return cls("poly", coeffs)

    def __call__(self, t):
        if self.kind == "constant":
            return self.value if np.isscalar(t) else np.full(np.shape(t), self.value)
        if self.kind == "piecewise_linear":
            out = np.interp(t, self.tp, self.vp)
            return float(out) if np.isscalar(t) else out
        out = np.polynomial.polynomial.polyval(t, self.coeffs)
        return float(out) if np.isscalar(t) else out

    def describe(self):
        if self.kind == "constant":
            return {"constant": self.value}
        if self.kind == "piecewise_linear":
            return {"piecewise_linear": np.column_stack([self.tp, self.vp]).tolist()}
        return {"poly": self.coeffs.tolist()}

    def sup_abs(self, T, n=2001):
        return float(np.max(np.abs(self(np.linspace(0.0, T, n)))))

    def plus(self, delta):
        """Same function shifted by the constant ``delta``."""
        if self.kind == "constant":
            return TimeFn("constant", self.value + delta)
        if self.kind == "piecewise_linear":
            return TimeFn("piecewise_linear", np.column_stack([self.tp, self.vp + delta]))
        c = self.coeffs.copy()
        c[0] += delta
        return TimeFn("poly", c)


Obstacle = TimeFn


@dataclass(frozen=True)
class LossFn:
    """``base(t, y) + kappa * eta`` with ``base`` from the catalog.

    ``kind`` is ``affine`` or ``tanh_warp``; ``feature`` names the path
    process ``eta`` (``brownian``, ``abs_brownian``) or is ``None``.
    """

    kind: str
    obstacle: Obstacle
    alpha: float = 0.0
    feature: str | None = None
    kappa: float = 0.0
    declared_band: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("affine", "tanh_warp"):
            raise ConfigError(f"unknown loss kind {self.kind!r}; available: affine, tanh_warp")
        if self.kind == "tanh_warp" and not abs(self.alpha) < 1:
            raise ConfigError(f"tanh_warp needs |alpha| < 1 to keep the band positive, got {self.alpha}")
        if self.feature not in (None, "brownian", "abs_brownian"):
            raise ConfigError(f"unknown shift feature {self.feature!r}; available: brownian, abs_brownian")

    @classmethod
    def affine(cls, obstacle, **kw):
        return cls("affine", obstacle, **kw)

    @classmethod
    def tanh_warp(cls, alpha, obstacle, **kw):
        return cls("tanh_warp", obstacle, alpha=alpha, **kw)

    @property
    def band(self):
        if self.declared_band is not None:
            return tuple(float(v) for v in self.declared_band)
        if self.kind == "affine":
            return (1.0, 1.0)
        return (min(1.0, 1.0 + self.alpha), max(1.0, 1.0 + self.alpha))

    @property
    def has_shift(self):
        return self.feature is not None and self.kappa != 0.0

    def base(self, t, y):
        u = self.obstacle(t)
        if self.kind == "affine":
            return y - u
        return y + self.alpha * np.tanh(y) - u

    def describe(self):
        d = {"kind": self.kind, "obstacle": self.obstacle.describe()}
        if self.kind == "tanh_warp":
            d["alpha"] = self.alpha
        if self.has_shift:
            d["shift"] = {"feature": self.feature, "kappa": self.kappa}
        return d


def sentinel_loss(side):
    """Loss whose constraint never binds: ``upper`` (L-side) or ``lower`` (R-side)."""
    if side == "upper":
        return LossFn.affine(Obstacle.constant(SENTINEL))
    if side == "lower":
        return LossFn.affine(Obstacle.constant(-SENTINEL))
    raise ValueError(side)


@dataclass(frozen=True)
class LossPair:
    """``L`` (upper, E[L] <= 0) and ``R`` (lower, E[R] >= 0) with declared separation."""

    L: LossFn
    R: LossFn
    gap: float = 0.0

    @property
    def band(self):
        cL, CL = self.L.band
        cR, CR = self.R.band
        return (min(cL, cR), max(CL, CR))

    def separation(self, times, ys=None):
        """Minimum of ``R - L`` over grid times and sample levels ``ys``.

        The path shifts only cancel when both losses carry the same one;
        otherwise the per-path infimum is unbounded below and ``-inf`` is
        returned.
        """
        if (self.L.feature, self.L.kappa) != (self.R.feature, self.R.kappa) and (self.L.has_shift or self.R.has_shift):
            return -np.inf
        ys = np.linspace(-10.0, 10.0, 401) if ys is None else np.asarray(ys, dtype=float)
        tt, yy = np.meshgrid(np.asarray(times, dtype=float), ys, indexing="ij")
        return float(np.min(self.R.base(tt, yy) - self.L.base(tt, yy)))


def eval_loss(loss, feature, t, y):
    """Value of ``loss`` at level ``y`` for a path whose feature value is ``feature``."""
    v = loss.base(t, y)
    if loss.has_shift:
        v = v + loss.kappa * feature
    return v


def mean_loss(loss, Y, ensemble):
    """Per-time ensemble mean of ``loss(t_k, Y[:, k])`` over an M x (N+1) array."""
    times = ensemble.grid.times
    vals = loss.base(times[None, :], Y)
    if loss.has_shift:
        vals = vals + loss.kappa * ensemble.feature(loss.feature)
    return tree_mean(vals)


class InducedBoundary(BoundaryFn):
    """``(t_k, x) -> mean_omega loss(t_k, x + S_k - mean S_k)`` on grid times.

    Centered values are computed once. For affine losses the centering
    cancels and the boundary is ``x - u(t) + kappa * mean(eta_t)`` exactly.
    """

    def __init__(self, S, loss, ensemble, offset=0):
        S = np.asarray(S, dtype=float)
        if not np.all(np.isfinite(S)):
            raise NumericError("induced boundary: non-finite values in the driving process")
        grid = ensemble.grid
        n = S.shape[1] if S.ndim == 2 else -1
        if S.ndim != 2 or S.shape[0] != ensemble.M or offset < 0 or offset + n > grid.N + 1:
            raise ValueError(f"process shape {S.shape} at offset {offset} does not fit ensemble "
                             f"({ensemble.M}, {grid.N + 1})")
        self.loss = loss
        self.grid = grid
        self.offset = offset
        self.centered = S - tree_mean(S)[None, :]
        cols = slice(offset, offset + n)
        self.eta = ensemble.feature(loss.feature)[:, cols] if loss.has_shift else None
        self.eta_mean = tree_mean(self.eta) if loss.has_shift else np.zeros(n)
        super().__init__(self._eval, loss.band, kind="induced", name=f"induced-{loss.kind}")

    def at(self, j, x):
        """Boundary at local column ``j`` (grid index ``offset + j``)."""
        t = self.grid.times[self.offset + j]
        if self.loss.kind == "affine":
            return x - self.loss.obstacle(t) + self.loss.kappa * self.eta_mean[j]
        vals = self.loss.base(t, x + self.centered[:, j])
        if self.eta is not None:
            vals = vals + self.loss.kappa * self.eta[:, j]
        return float(tree_mean(vals))

    def _eval(self, t, x):
        return self.at(self.grid.index_of(t) - self.offset, x)


def induced_boundary(S, loss, ensemble, offset=0):
    return InducedBoundary(S, loss, ensemble, offset)


def loss_boundary(loss):
    """Deterministic boundary ``(t, x) -> base(t, x)`` of a shift-free loss."""
    if loss.has_shift:
        raise ConfigError("a path-shifted loss has no deterministic boundary without an ensemble")
    return BoundaryFn(lambda t, x: float(loss.base(t, x)), loss.band, kind="analytic", name=loss.kind)


@dataclass
class BandReport:
    c: float
    C: float
    min_slope: float
    max_slope: float
    min_separation: float = float("nan")
    gap: float = float("nan")

    @property
    def lower_margin(self):
        return self.min_slope - self.c

    @property
    def upper_margin(self):
        return self.C - self.max_slope

    @property
    def separation_margin(self):
        return self.min_separation - self.gap


def verify_band(b, times, x_range=(-5.0, 5.0), n_samples=400, seed=0, rtol=1e-9, partner=None, gap=None):
    """Sample ``(t, x, y)`` triples and check ``c (y-x) <= b(t,y) - b(t,x) <= C (y-x)``.

    With ``partner`` (the lower boundary paired with ``b`` as upper) and
    ``gap`` the separation ``partner - b >= gap`` is checked as well. Raises
    :class:`InvariantViolation` carrying the worst witness.
    """
    c, C = b.band
    rng = np.random.default_rng(seed)
    times = np.asarray(times, dtype=float)
    ts = times[rng.integers(0, len(times), n_samples)]
    xy = rng.uniform(x_range[0], x_range[1], size=(n_samples, 2))
    x, y = xy.min(axis=1), xy.max(axis=1)
    keep = y - x > 1e-6
    ts, x, y = ts[keep], x[keep], y[keep]
    slopes = np.array([(b(t, yi) - b(t, xi)) / (yi - xi) for t, xi, yi in zip(ts, x, y)])
    tol = rtol * max(1.0, C)
    lo_i, hi_i = int(np.argmin(slopes)), int(np.argmax(slopes))
    if slopes[lo_i] < c - tol:
        raise InvariantViolation(f"slope {slopes[lo_i]:.6g} below declared c={c}",
                                 witness=(float(ts[lo_i]), float(x[lo_i]), float(y[lo_i])))
    if slopes[hi_i] > C + tol:
        raise InvariantViolation(f"slope {slopes[hi_i]:.6g} above declared C={C}",
                                 witness=(float(ts[hi_i]), float(x[hi_i]), float(y[hi_i])))
    report = BandReport(c=c, C=C, min_slope=float(slopes[lo_i]), max_slope=float(slopes[hi_i]))
    if partner is not None:
        gap = 0.0 if gap is None else gap
        seps = np.array([partner(t, xi) - b(t, xi) for t, xi in zip(ts, x)])
        j = int(np.argmin(seps))
        report.min_separation, report.gap = float(seps[j]), float(gap)
        if seps[j] < gap - tol:
            raise InvariantViolation(f"separation {seps[j]:.6g} below gap {gap}", witness=(float(ts[j]), float(x[j])))
    return report
