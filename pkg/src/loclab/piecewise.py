"""Piecewise-linear tables on a finite interval, zero outside.

All potentials fed to the ODE cores are reduced to this form, so every
breakpoint is known exactly and the integrator never steps across one.
Pieces are left-closed: y(x) = c0[i] + c1[i]*(x - breaks[i]) for
breaks[i] <= x < breaks[i+1].  The final right endpoint is treated as
belonging to the last piece so that constants evaluate sensibly at both
ends; everywhere else breakpoint values follow the piece on the right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PiecewiseLinear", "constant", "indicator", "from_samples", "merge_breaks"]


@dataclass(frozen=True)
class PiecewiseLinear:
    breaks: np.ndarray  # shape (n+1,), strictly increasing
    c0: np.ndarray      # shape (n,), value at the left end of each piece
    c1: np.ndarray      # shape (n,), slope of each piece

    def __post_init__(self):
        b = np.asarray(self.breaks, dtype=float)
        c0 = np.asarray(self.c0, dtype=float)
        c1 = np.asarray(self.c1, dtype=float)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("need at least one piece")
        if c0.shape != (b.size - 1,) or c1.shape != (b.size - 1,):
            raise ValueError("coefficient arrays do not match breaks")
        if not np.all(np.diff(b) > 0):
            raise ValueError("breaks must be strictly increasing")
        object.__setattr__(self, "breaks", b)
        object.__setattr__(self, "c0", c0)
        object.__setattr__(self, "c1", c1)

    # -- evaluation ----------------------------------------------------

    def _piece_index(self, x: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.breaks, x, side="right") - 1
        # fold the final right endpoint into the last piece
        idx = np.where(x == self.breaks[-1], len(self.c0) - 1, idx)
        return idx

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        xv = np.atleast_1d(x)
        idx = self._piece_index(xv)
        inside = (idx >= 0) & (idx < len(self.c0))
        safe = np.clip(idx, 0, len(self.c0) - 1)
        y = self.c0[safe] + self.c1[safe] * (xv - self.breaks[safe])
        y = np.where(inside, y, 0.0)
        return float(y[0]) if scalar else y

    def value_slope(self, x):
        """Value and slope at points x (zero outside the table)."""
        xv = np.atleast_1d(np.asarray(x, dtype=float))
        idx = self._piece_index(xv)
        inside = (idx >= 0) & (idx < len(self.c0))
        safe = np.clip(idx, 0, len(self.c0) - 1)
        y = np.where(inside, self.c0[safe] + self.c1[safe] * (xv - self.breaks[safe]), 0.0)
        s = np.where(inside, self.c1[safe], 0.0)
        return y, s

    # -- algebra -------------------------------------------------------

    def shift(self, dx: float) -> "PiecewiseLinear":
        return PiecewiseLinear(self.breaks + dx, self.c0.copy(), self.c1.copy())

    def scale(self, s: float) -> "PiecewiseLinear":
        return PiecewiseLinear(self.breaks.copy(), s * self.c0, s * self.c1)

    def __add__(self, other: "PiecewiseLinear") -> "PiecewiseLinear":
        if not isinstance(other, PiecewiseLinear):
            return NotImplemented
        lo = min(self.breaks[0], other.breaks[0])
        hi = max(self.breaks[-1], other.breaks[-1])
        bk = merge_breaks([self.breaks, other.breaks], lo, hi)
        mid = 0.5 * (bk[:-1] + bk[1:])
        ya, sa = self.value_slope(mid)
        yb, sb = other.value_slope(mid)
        c1 = sa + sb
        c0 = (ya + yb) - c1 * (mid - bk[:-1])
        return PiecewiseLinear(bk, c0, c1)

    def restrict(self, a: float, b: float) -> "PiecewiseLinear":
        """Restriction to [a, b], keeping zero extension semantics exact."""
        if not a < b:
            raise ValueError("empty interval")
        bk = merge_breaks([self.breaks], a, b)
        bk = bk[(bk >= a) & (bk <= b)]
        if bk[0] > a:
            bk = np.concatenate([[a], bk])
        if bk[-1] < b:
            bk = np.concatenate([bk, [b]])
        mid = 0.5 * (bk[:-1] + bk[1:])
        y, s = self.value_slope(mid)
        c0 = y - s * (mid - bk[:-1])
        return PiecewiseLinear(bk, c0, s)

    # -- exact queries (pieces are linear, so endpoints suffice) --------

    def piece_endpoint_values(self):
        left = self.c0
        right = self.c0 + self.c1 * np.diff(self.breaks)
        return left, right

    def sup_norm(self) -> float:
        left, right = self.piece_endpoint_values()
        return float(max(np.abs(left).max(), np.abs(right).max()))

    def min_value(self) -> float:
        left, right = self.piece_endpoint_values()
        return float(min(left.min(), right.min()))

    def integral(self, a: float | None = None, b: float | None = None) -> float:
        """Exact integral of the table over [a, b] (default: full support)."""
        a = self.breaks[0] if a is None else max(a, self.breaks[0])
        b = self.breaks[-1] if b is None else min(b, self.breaks[-1])
        if b <= a:
            return 0.0
        lo = np.maximum(self.breaks[:-1], a)
        hi = np.minimum(self.breaks[1:], b)
        w = np.clip(hi - lo, 0.0, None)
        yl = self.c0 + self.c1 * (lo - self.breaks[:-1])
        yh = self.c0 + self.c1 * (hi - self.breaks[:-1])
        return float(np.sum(0.5 * (yl + yh) * w))

    def abs_integral(self, a: float, b: float, offset: float = 0.0) -> float:
        """Exact integral of |y(x) + offset| over [a, b] inside the table."""
        a = max(a, self.breaks[0])
        b = min(b, self.breaks[-1])
        total = 0.0
        for i in range(len(self.c0)):
            lo = max(self.breaks[i], a)
            hi = min(self.breaks[i + 1], b)
            if hi <= lo:
                continue
            v0 = self.c0[i] + offset + self.c1[i] * (lo - self.breaks[i])
            v1 = self.c0[i] + offset + self.c1[i] * (hi - self.breaks[i])
            if v0 * v1 >= 0.0:
                total += 0.5 * abs(v0 + v1) * (hi - lo)
            else:
                # linear piece changes sign once
                t = lo + (hi - lo) * v0 / (v0 - v1)
                total += 0.5 * abs(v0) * (t - lo) + 0.5 * abs(v1) * (hi - t)
        return float(total)

    def antiderivative(self, xs) -> np.ndarray:
        """Exact values of int_{breaks[0]}^x y dt, x clipped to the table."""
        widths = np.diff(self.breaks)
        piece_int = (self.c0 + 0.5 * self.c1 * widths) * widths
        cum = np.concatenate([[0.0], np.cumsum(piece_int)])
        xv = np.clip(np.asarray(xs, dtype=float), self.breaks[0], self.breaks[-1])
        idx = np.clip(np.searchsorted(self.breaks, xv, side="right") - 1, 0, len(self.c0) - 1)
        dx = xv - self.breaks[idx]
        return cum[idx] + (self.c0[idx] + 0.5 * self.c1[idx] * dx) * dx

    def tile(self, n_lo: int, n_hi: int, weights=None) -> "PiecewiseLinear":
        """Sum of shifted copies y(x - n) for n in [n_lo, n_hi], optionally weighted."""
        parts = []
        for j, n in enumerate(range(n_lo, n_hi + 1)):
            w = 1.0 if weights is None else float(weights[j])
            parts.append(self.shift(float(n)).scale(w))
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out


def merge_breaks(arrays, lo: float, hi: float) -> np.ndarray:
    """Sorted unique breakpoints covering [lo, hi], keeping interior points only."""
    pts = [np.asarray([lo, hi], dtype=float)]
    for a in arrays:
        a = np.asarray(a, dtype=float)
        pts.append(a[(a > lo) & (a < hi)])
    out = np.unique(np.concatenate(pts))
    # drop near-duplicates that differ only by rounding
    keep = np.concatenate([[True], np.diff(out) > 1e-13 * max(1.0, abs(hi), abs(lo))])
    return out[keep]


def constant(value: float, a: float, b: float) -> PiecewiseLinear:
    return PiecewiseLinear(np.array([a, b]), np.array([float(value)]), np.array([0.0]))


def indicator(a: float, b: float, height: float = 1.0) -> PiecewiseLinear:
    return constant(height, a, b)


def from_samples(xs, ys) -> PiecewiseLinear:
    """Continuous piecewise-linear interpolant through (xs, ys)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.ndim != 1 or xs.size < 2 or xs.shape != ys.shape:
        raise ValueError("need matching 1d arrays with at least two samples")
    if not np.all(np.diff(xs) > 0):
        raise ValueError("sample points must be strictly increasing")
    c1 = np.diff(ys) / np.diff(xs)
    return PiecewiseLinear(xs, ys[:-1].copy(), c1)
