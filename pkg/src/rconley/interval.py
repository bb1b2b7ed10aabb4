"""Vectorised interval arithmetic with outward rounding.

Every result is widened by one ulp on each side, which is enough to cover
the round-to-nearest error of a single IEEE operation.
"""
from __future__ import annotations

import numpy as np


def _down(x):
    return np.nextafter(x, -np.inf)


def _up(x):
    return np.nextafter(x, np.inf)


class Interval:
    """Array of closed intervals ``[lo, hi]`` (elementwise)."""

    __slots__ = ("lo", "hi")
    __array_priority__ = 1000

    def __init__(self, lo, hi=None):
        lo = np.asarray(lo, dtype=float)
        hi = lo if hi is None else np.asarray(hi, dtype=float)
        lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(lo > hi):
            raise ValueError("interval with lo > hi")
        self.lo = lo
        self.hi = hi

    @staticmethod
    def lift(x) -> "Interval":
        return x if isinstance(x, Interval) else Interval(x, x)

    @property
    def mid(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def width(self):
        return self.hi - self.lo

    def __repr__(self):
        return f"Interval({self.lo!r}, {self.hi!r})"

    def contains(self, x) -> np.ndarray:
        return (self.lo <= x) & (x <= self.hi)

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def __pos__(self):
        return self

    def __add__(self, other):
        o = Interval.lift(other)
        return Interval(_down(self.lo + o.lo), _up(self.hi + o.hi))

    __radd__ = __add__

    def __sub__(self, other):
        o = Interval.lift(other)
        return Interval(_down(self.lo - o.hi), _up(self.hi - o.lo))

    def __rsub__(self, other):
        return Interval.lift(other) - self

    def __mul__(self, other):
        o = Interval.lift(other)
        cands = np.stack([self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi])
        # 0 * inf gives nan; only reachable with unbounded inputs
        cands = np.where(np.isnan(cands), 0.0, cands)
        return Interval(_down(cands.min(axis=0)), _up(cands.max(axis=0)))

    __rmul__ = __mul__

    def reciprocal(self) -> "Interval":
        if np.any((self.lo <= 0) & (self.hi >= 0)):
            raise ZeroDivisionError("interval contains zero")
        return Interval(_down(1.0 / self.hi), _up(1.0 / self.lo))

    def __truediv__(self, other):
        return self * Interval.lift(other).reciprocal()

    def __rtruediv__(self, other):
        return Interval.lift(other) * self.reciprocal()

    def __pow__(self, n: int):
        if not isinstance(n, (int, np.integer)) or n < 0:
            raise ValueError("only non-negative integer powers")
        if n == 0:
            return Interval(np.ones_like(self.lo))
        if n == 1:
            return self
        a, b = self.lo ** n, self.hi ** n
        if n % 2:
            lo, hi = a, b
        else:
            straddle = (self.lo <= 0) & (self.hi >= 0)
            lo = np.where(straddle, 0.0, np.minimum(a, b))
            hi = np.maximum(a, b)
        # x**n is not correctly rounded: widen by a few ulps per factor
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        for _ in range(n):
            lo, hi = _down(lo), _up(hi)
        if n % 2 == 0:
            lo = np.maximum(lo, 0.0)
        return Interval(lo, hi)

    def hull(self, other: "Interval") -> "Interval":
        o = Interval.lift(other)
        return Interval(np.minimum(self.lo, o.lo), np.maximum(self.hi, o.hi))


def lift_like(value, like):
    """Broadcast a constant to an ``Interval`` when ``like`` is one."""
    if isinstance(like, Interval) and not isinstance(value, Interval):
        return Interval(value)
    return value
