"""Regression estimates of conditional expectations and martingale integrands.

``E[target | F_{t_k}]`` is approximated by least squares on a Hermite
polynomial basis in the standardized Brownian value ``W_k``. The constant is
handled by centering: the fit is ``mean(target) + Bc @ beta`` with ``Bc``
the centered non-constant columns, so the ensemble mean of the estimate equals
the ensemble mean of the target. All reductions use :func:`tree_sum`.

A Gauss-Hermite / Gauss-Legendre oracle gives exact conditional expectations
of ``phi(B_T)`` given ``B_t`` for the catalog of terminal functions.
"""

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss, hermevander
from scipy.linalg import cho_factor, cho_solve
from scipy.special import roots_legendre

from dmrbsde.errors import ConfigError, NumericError, OracleUnavailable, RegressionError
from dmrbsde.grid import tree_mean, tree_sum

COND_MAX = 1e12


@dataclass(frozen=True)
class RegressionSpec:
    degree: int = 4
    ridge: float = 1e-10
    standardize: bool = True

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ConfigError(f"regression degree must be a non-negative integer, got {self.degree!r}")
        if not self.ridge >= 0:
            raise ConfigError(f"ridge must be >= 0, got {self.ridge!r}")


class _Projector:
    """Least-squares projection onto the basis at one time index."""

    def __init__(self, ensemble, k, spec):
        self.M = ensemble.M
        self.trivial = k == 0 or spec.degree == 0
        if self.trivial:
            return
        w = ensemble.W[:, k]
        if spec.standardize:
            mu = tree_mean(w)
            sd = np.sqrt(tree_mean((w - mu) ** 2))
            if not sd > 0:
                self.trivial = True
                return
            z = (w - mu) / sd
        else:
            z = w
        B = hermevander(z, spec.degree)[:, 1:]
        self.Bc = B - tree_mean(B)[None, :]
        p = self.Bc.shape[1]
        G = tree_sum(self.Bc[:, :, None] * self.Bc[:, None, :]) / self.M + spec.ridge * np.eye(p)
        cond = np.linalg.cond(G)
        if not np.isfinite(cond) or cond > COND_MAX:
            raise RegressionError(f"regression Gram matrix at index {k} is ill-conditioned (cond={cond:.3e})",
                                  witness=(k, float(cond)))
        self.factor = cho_factor(G)

    def fit(self, target):
        target = np.asarray(target, dtype=float)
        mean = tree_mean(target)
        if self.trivial:
            return np.broadcast_to(mean, target.shape).copy()
        yc = target - mean
        if target.ndim == 1:
            rhs = tree_sum(self.Bc * yc[:, None]) / self.M
            beta = cho_solve(self.factor, rhs)
            out = np.full(self.M, mean)
            for j in range(len(beta)):
                out += self.Bc[:, j] * beta[j]
            return out
        rhs = tree_sum(self.Bc[:, :, None] * yc[:, None, :]) / self.M
        beta = cho_solve(self.factor, rhs)
        out = np.broadcast_to(mean, target.shape).copy()
        for j in range(beta.shape[0]):
            out += self.Bc[:, j:j + 1] * beta[j][None, :]
        return out


def projector(ensemble, k, spec):
    """Cached projector for ``(ensemble, k, spec)``; the cache lives on the ensemble."""
    cache = ensemble.__dict__.get("_projectors")
    if cache is None:
        cache = {}
        object.__setattr__(ensemble, "_projectors", cache)
    key = (k, spec)
    if key not in cache:
        cache[key] = _Projector(ensemble, k, spec)
    return cache[key]


def regress_condexp(ensemble, target, k, spec=RegressionSpec(), measurable_at=None):
    """Estimate ``E[target | F_{t_k}]`` path by path.

    ``measurable_at`` is the index at which ``target`` is known; there the
    target is returned unchanged. It defaults to ``N``.
    """
    target = np.asarray(target, dtype=float)
    if target.shape[0] != ensemble.M:
        raise ValueError(f"target has {target.shape[0]} rows, ensemble has {ensemble.M}")
    if not np.all(np.isfinite(target)):
        raise NumericError(f"non-finite regression target at index {k}", witness=(k,))
    last = ensemble.grid.N if measurable_at is None else measurable_at
    if k == last:
        return target.copy()
    if not 0 <= k < last:
        raise ValueError(f"index {k} outside [0, {last}]")
    return projector(ensemble, k, spec).fit(target)


def extract_martingale_z(ensemble, H, spec=RegressionSpec(), window=None):
    """Martingale ``M_k = E_k[H] - E[H]`` and integrand ``Z`` of an ``F_T``-measurable ``H``.

    ``Z_k = E_k[(M_{k+1} - M_k) dW_k] / dt`` for ``k < N`` and ``Z_N = Z_{N-1}``.
    With ``window=(k0, k1)`` the target is taken as ``F_{t_{k1}}``-measurable
    and the returned arrays cover columns ``k0..k1``; ``M`` is then relative
    to the ensemble mean of ``H``.
    """
    N = ensemble.grid.N
    k0, k1 = (0, N) if window is None else window
    H = np.asarray(H, dtype=float)
    cond = conditional_path(ensemble, H, spec, k0, k1)
    Mart = cond - tree_mean(H)
    Z = integrand(ensemble, Mart, spec, k0, k1)
    return Mart, Z


def conditional_path(ensemble, H, spec, k0, k1):
    """``E_k[H]`` for ``k = k0..k1`` with ``H`` known at ``k1``."""
    out = np.empty((ensemble.M, k1 - k0 + 1))
    for j, k in enumerate(range(k0, k1 + 1)):
        out[:, j] = regress_condexp(ensemble, H, k, spec, measurable_at=k1)
    return out


def integrand(ensemble, Mart, spec, k0, k1):
    """``Z`` columns ``k0..k1`` from martingale columns ``k0..k1``."""
    dt = ensemble.grid.dt
    Z = np.empty_like(Mart)
    for j, k in enumerate(range(k0, k1)):
        Z[:, j] = regress_condexp(ensemble, (Mart[:, j + 1] - Mart[:, j]) * ensemble.dW[:, k], k, spec) / dt
    Z[:, -1] = Z[:, -2]
    return Z


# terminal functions with exact Gaussian expectations

@dataclass(frozen=True)
class TerminalFn:
    """``phi`` in ``xi = phi(B_T)``: ``affine``, ``poly``, ``call``, ``sin`` or ``custom``."""

    kind: str
    params: tuple = ()
    fn: object = None

    def __post_init__(self):
        if self.kind not in ("affine", "poly", "call", "sin", "custom"):
            raise ConfigError(f"unknown terminal kind {self.kind!r}; available: affine, poly, call, sin")
        if self.kind == "custom" and not callable(self.fn):
            raise ConfigError("custom terminal function needs a callable")

    @classmethod
    def affine(cls, slope=1.0, intercept=0.0):
        return cls("affine", (float(slope), float(intercept)))

    @classmethod
    def poly(cls, coeffs):
        return cls("poly", tuple(float(c) for c in coeffs))

    @classmethod
    def call(cls, strike=0.0, scale=1.0):
        return cls("call", (float(strike), float(scale)))

    @classmethod
    def sin(cls, amp=1.0, freq=1.0, phase=0.0):
        return cls("sin", (float(amp), float(freq), float(phase)))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "affine":
            return p[1] + p[0] * x
        if self.kind == "poly":
            return np.polynomial.polynomial.polyval(x, np.asarray(p))
        if self.kind == "call":
            return p[1] * np.maximum(x - p[0], 0.0)
        if self.kind == "sin":
            return p[0] * np.sin(p[1] * x + p[2])
        return np.asarray(self.fn(x), dtype=float)

    @property
    def kinks(self):
        return (self.params[0],) if self.kind == "call" else ()

    def describe(self):
        names = {"affine": ("slope", "intercept"), "call": ("strike", "scale"),
                 "sin": ("amp", "freq", "phase")}
        if self.kind == "poly":
            return {"kind": "poly", "coeffs": list(self.params)}
        if self.kind == "custom":
            return {"kind": "custom"}
        return {"kind": self.kind, **dict(zip(names[self.kind], self.params))}


_GH_X, _GH_W = hermegauss(64)
_GH_W = _GH_W / np.sqrt(2.0 * np.pi)
_GL_X, _GL_W = roots_legendre(24)


def _normal_pdf(u):
    return np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)


def _legendre(fn, a, b, panel=0.5):
    n = max(1, int(np.ceil((b - a) / panel)))
    edges = np.linspace(a, b, n + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        u = lo + half * (_GL_X + 1.0)
        total += half * float(np.dot(_GL_W, fn(u)))
    return total


def gaussian_expectation(fn, mean, sd, kinks=()):
    """``E[fn(mean + sd G)]`` for standard normal ``G``.

    Smooth integrands use 64-node Gauss-Hermite; with kinks the real line is
    split at them and each piece is integrated by composite Gauss-Legendre on
    ``[-14, 14]`` standard deviations.
    """
    if sd == 0.0:
        return float(fn(np.asarray([mean]))[0])
    if not kinks:
        return float(np.dot(_GH_W, fn(mean + sd * _GH_X)))
    cuts = sorted((k - mean) / sd for k in kinks)
    lo, hi = min(-14.0, cuts[0] - 14.0), max(14.0, cuts[-1] + 14.0)
    edges = [lo] + [c for c in cuts if lo < c < hi] + [hi]
    integrand_ = lambda u: fn(mean + sd * u) * _normal_pdf(u)
    return sum(_legendre(integrand_, a, b) for a, b in zip(edges[:-1], edges[1:]))


def quadrature_condexp_oracle(phi, t, b, T):
    """``E[phi(B_T) | B_t = b]`` by quadrature; vectorized over ``b``."""
    if phi.kind == "custom":
        raise OracleUnavailable("no quadrature oracle for a custom terminal function")
    if not 0 <= t <= T:
        raise ValueError(f"need 0 <= t <= T, got t={t}, T={T}")
    sd = np.sqrt(T - t)
    bs = np.atleast_1d(np.asarray(b, dtype=float))
    out = np.array([gaussian_expectation(phi, bi, sd, phi.kinks) for bi in bs])
    return out if np.ndim(b) else float(out[0])
