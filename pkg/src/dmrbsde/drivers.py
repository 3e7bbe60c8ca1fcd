"""Driver functions ``f(t, y, z)`` for the backward equations."""

from dataclasses import dataclass, field

import numpy as np

from dmrbsde.boundaries import TimeFn
from dmrbsde.errors import ConfigError

_ZERO = TimeFn.constant(0.0)


@dataclass(frozen=True)
class DriverSpec:
    """Catalog driver.

    * ``zero``: ``f = 0``.
    * ``affine``: ``f = a(t) y + b(t) z + c(t)``.
    * ``lipschitz``: ``f = lam1 sin(y) + lam2 cos(z) + c(t)``.
    """

    kind: str = "zero"
    a: TimeFn = field(default=_ZERO)
    b: TimeFn = field(default=_ZERO)
    c: TimeFn = field(default=_ZERO)
    lam1: float = 0.0
    lam2: float = 0.0
    T: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "affine", "lipschitz"):
            raise ConfigError(f"unknown driver kind {self.kind!r}; available: zero, affine, lipschitz")

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def affine(cls, a=0.0, b=0.0, c=0.0, T=1.0):
        wrap = lambda v: v if isinstance(v, TimeFn) else TimeFn.constant(v)
        return cls("affine", a=wrap(a), b=wrap(b), c=wrap(c), T=T)

    @classmethod
    def lipschitz(cls, lam1, lam2, c=0.0, T=1.0):
        wrap = lambda v: v if isinstance(v, TimeFn) else TimeFn.constant(v)
        return cls("lipschitz", c=wrap(c), lam1=float(lam1), lam2=float(lam2), T=T)

    def __call__(self, t, y, z):
        y = np.asarray(y, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.kind == "zero":
            return np.zeros(np.broadcast(y, t).shape)
        if self.kind == "affine":
            return self.a(t) * y + self.b(t) * np.asarray(z) + self.c(t)
        return self.lam1 * np.sin(y) + self.lam2 * np.cos(z) + self.c(t)

    @property
    def lipschitz_constant(self):
        if self.kind == "zero":
            return 0.0
        if self.kind == "affine":
            return max(self.a.sup_abs(self.T), self.b.sup_abs(self.T))
        return max(abs(self.lam1), abs(self.lam2))

    @property
    def depends_on_state(self):
        if self.kind == "zero":
            return False
        if self.kind == "affine":
            return self.a.sup_abs(self.T) > 0 or self.b.sup_abs(self.T) > 0
        return self.lam1 != 0.0 or self.lam2 != 0.0

    def linear_in_y(self):
        """``a`` with ``f = a(t) y + h(t, z)``, or ``None`` if the driver is not of that form."""
        if self.kind == "zero":
            return _ZERO
        if self.kind == "affine":
            return self.a
        return _ZERO if self.lam1 == 0.0 else None

    def describe(self):
        if self.kind == "zero":
            return {"kind": "zero"}
        if self.kind == "affine":
            return {"kind": "affine", "a": self.a.describe(), "b": self.b.describe(), "c": self.c.describe()}
        return {"kind": "lipschitz", "lam1": self.lam1, "lam2": self.lam2, "c": self.c.describe()}
