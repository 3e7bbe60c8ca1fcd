"""Time grids, seeded Brownian ensembles and fixed-order ensemble reductions."""

from dataclasses import dataclass, field

import numpy as np

from dmrbsde.errors import ConfigError


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int
    times: np.ndarray = field(repr=False, compare=False)
    dt: float

    def index_of(self, t, atol=1e-9):
        """Grid index of time ``t``; raises if ``t`` is not a grid point."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.N or abs(self.times[k] - t) > atol * max(1.0, self.T):
            raise ValueError(f"time {t!r} is not on the grid (T={self.T}, N={self.N})")
        return k


def make_grid(T, N):
    if not np.isfinite(T) or T <= 0:
        raise ConfigError(f"horizon T must be positive, got {T!r}")
    if int(N) != N or N < 2:
        raise ConfigError(f"step count N must be an integer >= 2, got {N!r}")
    N = int(N)
    times = np.arange(N + 1, dtype=float) * (T / N)
    times[-1] = T
    times.setflags(write=False)
    return TimeGrid(T=float(T), N=N, times=times, dt=T / N)


@dataclass(frozen=True)
class PathEnsemble:
    grid: TimeGrid
    M: int
    W: np.ndarray = field(repr=False)
    dW: np.ndarray = field(repr=False)
    seed: int
    antithetic: bool = False

    def feature(self, name):
        """Per-path process used by loss shifts: ``brownian`` or ``abs_brownian``."""
        if name == "brownian":
            return self.W
        if name == "abs_brownian":
            return np.abs(self.W)
        raise ConfigError(f"unknown path feature {name!r}; available: brownian, abs_brownian")


def sample_ensemble(grid, M, seed, antithetic=False):
    """Draw ``M`` Brownian paths on ``grid``.

    Increments come from a Philox counter-based stream filled row-major, so
    entry (m, k) depends only on ``seed``. ``dW`` is recomputed as the
    difference of the cumulated ``W`` so that ``W[:, k+1] - W[:, k] == dW[:, k]``
    holds bit for bit.
    """
    if int(M) != M or M < 2:
        raise ConfigError(f"path count M must be an integer >= 2, got {M!r}")
    M = int(M)
    if antithetic and M % 2:
        raise ConfigError("antithetic sampling needs an even path count")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    scale = np.sqrt(grid.dt)
    if antithetic:
        half = rng.standard_normal((M // 2, grid.N)) * scale
        raw = np.empty((M, grid.N))
        raw[0::2] = half
        raw[1::2] = -half
    else:
        raw = rng.standard_normal((M, grid.N)) * scale
    W = np.zeros((M, grid.N + 1))
    np.cumsum(raw, axis=1, out=W[:, 1:])
    dW = np.diff(W, axis=1)
    W.setflags(write=False)
    dW.setflags(write=False)
    return PathEnsemble(grid=grid, M=M, W=W, dW=dW, seed=int(seed), antithetic=bool(antithetic))


def tree_sum(a):
    """Sum over the leading axis with a fixed pairwise tree.

    Row i is always combined with row i + h at each level, so the result
    depends only on the data, never on scheduling.
    """
    a = np.asarray(a, dtype=float)
    if a.shape[0] == 0:
        raise ValueError("empty ensemble")
    while a.shape[0] > 1:
        n = a.shape[0]
        h = n // 2
        s = a[:h] + a[h:2 * h]
        if n % 2:
            s = np.concatenate([s, a[2 * h:]], axis=0)
        a = s
    return a[0]


def tree_mean(a):
    a = np.asarray(a, dtype=float)
    return tree_sum(a) / a.shape[0]


def ensemble_mean(X):
    """Per-time means of an M x (N+1) path array."""
    return tree_mean(X)
