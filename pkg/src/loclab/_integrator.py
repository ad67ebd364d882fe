"""Adaptive Dormand-Prince 5(4) cores over piecewise-linear potentials.

Two first-order systems share one compiled stepper:

  mode 0 (phase/amplitude):  phi' = 1 - (1+q)sin^2(phi),
                             (ln R)' = (1+q) sin(phi) cos(phi)
  mode 1 (cartesian):        u' = p, p' = q u

Both optionally accumulate I_w = int w(x) u^2 dx and I_u = int u^2 dx
along the traversal (signed, so backward runs give int_{x0}^{x} ...).
The potential q and the weight w are piecewise linear; the break set is
merged into the segment grid, so a step never crosses a breakpoint and
the right-hand side is a polynomial on every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .piecewise import PiecewiseLinear, merge_breaks

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-10

# Dormand-Prince 5(4) tableau (FSAL)
_C2, _C3, _C4, _C5 = 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0
_A21 = 1.0 / 5.0
_A31, _A32 = 3.0 / 40.0, 9.0 / 40.0
_A41, _A42, _A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
_A51, _A52, _A53, _A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
_A61, _A62, _A63, _A64, _A65 = (
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
)
_B1, _B3, _B4, _B5, _B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71.0 / 57600.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
)

_MAX_STEPS_PER_SEGMENT = 1_000_000


class IntegrationError(RuntimeError):
    """Raised when the adaptive stepper cannot satisfy the tolerance."""

    def __init__(self, message: str, x: float):
        super().__init__(f"{message} at x = {x!r}")
        self.x = x


@njit(inline="always", cache=True)
def _rhs(mode, xrel, ya, yb, q0, q1, w0, w1, want_int):
    q = q0 + q1 * xrel
    if mode == 0:
        s = math.sin(ya)
        c = math.cos(ya)
        om = 1.0 + q
        da = 1.0 - om * s * s
        db = om * s * c
        u2 = math.exp(2.0 * yb) * s * s if want_int else 0.0
    else:
        da = yb
        db = q * ya
        u2 = ya * ya if want_int else 0.0
    dfi = (w0 + w1 * xrel) * u2
    return da, db, dfi, u2


@njit(cache=True, nogil=True)
def _core(mode, xs, qc0, qc1, wc0, wc1, ya0, yb0, rtol, atol, want_int, rec_mask, out):
    """Integrate across all segments; record state rows where rec_mask is set.

    Returns (status, x): status 0 ok, 1 step underflow, 2 step-count blowup.
    """
    ya = ya0
    yb = yb0
    yf = 0.0
    yu = 0.0
    nrec = 0
    if rec_mask[0]:
        out[nrec, 0] = ya
        out[nrec, 1] = yb
        out[nrec, 2] = yf
        out[nrec, 3] = yu
        nrec += 1
    nseg = qc0.shape[0]
    nact = 4.0 if want_int else 2.0
    h_carry = 0.0
    for j in range(nseg):
        xl = xs[j]
        xr = xs[j + 1]
        seg = xr - xl
        dirn = 1.0 if seg > 0.0 else -1.0
        q0 = qc0[j]
        q1 = qc1[j]
        w0 = wc0[j]
        w1 = wc1[j]
        x = xl
        # fresh derivative at segment start (potential may jump here)
        k1a, k1b, k1f, k1u = _rhs(mode, 0.0, ya, yb, q0, q1, w0, w1, want_int)
        if h_carry > 0.0:
            h_mag = h_carry
        else:
            h_mag = 0.01 / (1.0 + abs(q0))
        steps = 0
        while True:
            rem = abs(xr - x)
            if rem <= 0.0:
                break
            clipped = h_mag >= rem
            if clipped:
                h_mag = rem
            h = dirn * h_mag
            xrel = x - xl

            y2a = ya + h * (_A21 * k1a)
            y2b = yb + h * (_A21 * k1b)
            k2a, k2b, k2f, k2u = _rhs(mode, xrel + _C2 * h, y2a, y2b, q0, q1, w0, w1, want_int)

            y3a = ya + h * (_A31 * k1a + _A32 * k2a)
            y3b = yb + h * (_A31 * k1b + _A32 * k2b)
            k3a, k3b, k3f, k3u = _rhs(mode, xrel + _C3 * h, y3a, y3b, q0, q1, w0, w1, want_int)

            y4a = ya + h * (_A41 * k1a + _A42 * k2a + _A43 * k3a)
            y4b = yb + h * (_A41 * k1b + _A42 * k2b + _A43 * k3b)
            k4a, k4b, k4f, k4u = _rhs(mode, xrel + _C4 * h, y4a, y4b, q0, q1, w0, w1, want_int)

            y5a = ya + h * (_A51 * k1a + _A52 * k2a + _A53 * k3a + _A54 * k4a)
            y5b = yb + h * (_A51 * k1b + _A52 * k2b + _A53 * k3b + _A54 * k4b)
            k5a, k5b, k5f, k5u = _rhs(mode, xrel + _C5 * h, y5a, y5b, q0, q1, w0, w1, want_int)

            y6a = ya + h * (_A61 * k1a + _A62 * k2a + _A63 * k3a + _A64 * k4a + _A65 * k5a)
            y6b = yb + h * (_A61 * k1b + _A62 * k2b + _A63 * k3b + _A64 * k4b + _A65 * k5b)
            k6a, k6b, k6f, k6u = _rhs(mode, xrel + h, y6a, y6b, q0, q1, w0, w1, want_int)

            na = ya + h * (_B1 * k1a + _B3 * k3a + _B4 * k4a + _B5 * k5a + _B6 * k6a)
            nb = yb + h * (_B1 * k1b + _B3 * k3b + _B4 * k4b + _B5 * k5b + _B6 * k6b)
            nf = yf + h * (_B1 * k1f + _B3 * k3f + _B4 * k4f + _B5 * k5f + _B6 * k6f)
            nu = yu + h * (_B1 * k1u + _B3 * k3u + _B4 * k4u + _B5 * k5u + _B6 * k6u)
            k7a, k7b, k7f, k7u = _rhs(mode, xrel + h, na, nb, q0, q1, w0, w1, want_int)

            ea = h * (_E1 * k1a + _E3 * k3a + _E4 * k4a + _E5 * k5a + _E6 * k6a + _E7 * k7a)
            eb = h * (_E1 * k1b + _E3 * k3b + _E4 * k4b + _E5 * k5b + _E6 * k6b + _E7 * k7b)
            ef = h * (_E1 * k1f + _E3 * k3f + _E4 * k4f + _E5 * k5f + _E6 * k6f + _E7 * k7f)
            eu = h * (_E1 * k1u + _E3 * k3u + _E4 * k4u + _E5 * k5u + _E6 * k6u + _E7 * k7u)

            sa = atol + rtol * max(abs(ya), abs(na))
            sb = atol + rtol * max(abs(yb), abs(nb))
            sf = atol + rtol * max(abs(yf), abs(nf))
            su = atol + rtol * max(abs(yu), abs(nu))
            err = (ea / sa) ** 2 + (eb / sb) ** 2
            if want_int:
                err += (ef / sf) ** 2 + (eu / su) ** 2
            err = math.sqrt(err / nact)

            if err <= 1.0:
                x = xr if clipped else x + h
                ya, yb, yf, yu = na, nb, nf, nu
                k1a, k1b, k1f, k1u = k7a, k7b, k7f, k7u
                fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
                h_mag = h_mag * fac
                h_carry = h_mag
            else:
                fac = max(0.2, min(1.0, 0.9 * err ** -0.2))
                h_mag = h_mag * fac
                if h_mag < 1e-14 * max(1.0, abs(x)):
                    return 1, x
            steps += 1
            if steps > _MAX_STEPS_PER_SEGMENT:
                return 2, x
        if rec_mask[j + 1]:
            out[nrec, 0] = ya
            out[nrec, 1] = yb
            out[nrec, 2] = yf
            out[nrec, 3] = yu
            nrec += 1
    return 0, xs[nseg]


@dataclass
class PathResult:
    """State samples along a traversal, aligned with ``x`` (traversal order)."""

    x: np.ndarray
    a: np.ndarray       # phase (mode 0) or u (mode 1)
    b: np.ndarray       # ln R (mode 0) or u' (mode 1)
    int_w: np.ndarray   # signed int w u^2 from the start point
    int_u: np.ndarray   # signed int u^2 from the start point

    @property
    def end(self):
        return self.a[-1], self.b[-1], self.int_w[-1], self.int_u[-1]


class SegmentedPath:
    """Reusable segment data for integrations from ``a`` to ``b``.

    The effective potential of a run is q + lam * w - E, where q and w are
    the piecewise-linear tables given here; w doubles as the accumulator
    weight for I_w.  This lets one preparation serve a whole family of
    coupling values, which is what the kernel assembly loops need.
    """

    def __init__(self, q: PiecewiseLinear, weight: PiecewiseLinear | None,
                 a: float, b: float, record_points=None,
                 rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL):
        if a == b:
            raise ValueError("degenerate interval")
        self.a = float(a)
        self.b = float(b)
        self.rtol = float(rtol)
        self.atol = float(atol)
        lo, hi = (a, b) if a < b else (b, a)
        arrays = [q.breaks]
        if weight is not None:
            arrays.append(weight.breaks)
        req = np.empty(0) if record_points is None else np.asarray(record_points, dtype=float)
        if req.size and (req.min() < lo or req.max() > hi):
            raise ValueError("record points outside the interval")
        bk = merge_breaks(arrays + [req], lo, hi)
        mids = 0.5 * (bk[:-1] + bk[1:])
        qv, qs = q.value_slope(mids)
        if weight is not None:
            wv, ws = weight.value_slope(mids)
        else:
            wv = np.zeros_like(mids)
            ws = np.zeros_like(mids)
        if a < b:
            xs = bk
            left = bk[:-1]
            self._qc0 = qv - qs * (mids - left)
            self._qc1 = qs.copy()
            self._wc0 = wv - ws * (mids - left)
            self._wc1 = ws.copy()
        else:
            xs = bk[::-1]
            left = xs[:-1]  # traversal-left ends are ascending right ends
            qvr, qsr, wvr, wsr = qv[::-1], qs[::-1], wv[::-1], ws[::-1]
            midr = mids[::-1]
            self._qc0 = qvr - qsr * (midr - left)
            self._qc1 = qsr.copy()
            self._wc0 = wvr - wsr * (midr - left)
            self._wc1 = wsr.copy()
        self.xs = xs
        rec = np.zeros(xs.size, dtype=np.bool_)
        rec[-1] = True  # endpoint always recorded
        if req.size:
            for p in req:
                i = int(np.argmin(np.abs(xs - p)))
                if abs(xs[i] - p) > 1e-12 * max(1.0, abs(p)):
                    raise RuntimeError("record point lost during merge")
                rec[i] = True
        self._rec = rec
        self.record_x = xs[rec]

    def _run(self, mode: int, ya0: float, yb0: float, E: float, lam: float,
             want_integrals: bool, rtol, atol) -> PathResult:
        if lam == 0.0:
            qc0 = self._qc0 - E if E != 0.0 else self._qc0
            qc1 = self._qc1
        else:
            qc0 = self._qc0 + lam * self._wc0 - E
            qc1 = self._qc1 + lam * self._wc1
        out = np.empty((int(self._rec.sum()), 4))
        status, xf = _core(mode, self.xs, qc0, qc1, self._wc0, self._wc1,
                           ya0, yb0,
                           self.rtol if rtol is None else rtol,
                           self.atol if atol is None else atol,
                           want_integrals, self._rec, out)
        if status == 1:
            raise IntegrationError("step size underflow", xf)
        if status == 2:
            raise IntegrationError("step budget exhausted", xf)
        return PathResult(self.record_x, out[:, 0], out[:, 1], out[:, 2], out[:, 3])

    def prufer(self, theta0: float, E: float = 0.0, lam: float = 0.0,
               want_integrals: bool = True, rtol=None, atol=None) -> PathResult:
        return self._run(0, float(theta0), 0.0, E, lam, want_integrals, rtol, atol)

    def cartesian(self, u0: float, du0: float, E: float = 0.0, lam: float = 0.0,
                  want_integrals: bool = True, rtol=None, atol=None) -> PathResult:
        return self._run(1, float(u0), float(du0), E, lam, want_integrals, rtol, atol)


def warmup():
    """Trigger JIT compilation once (cached on disk afterwards)."""
    from .piecewise import constant

    p = SegmentedPath(constant(0.5, 0.0, 1.0), None, 0.0, 1.0)
    p.prufer(0.3, E=0.2)
    p.cartesian(0.0, 1.0, E=0.2)
