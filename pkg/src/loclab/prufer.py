"""Phase/amplitude flow for -u'' + (q - E) u = 0 and its derivative identities.

The substitution u = R sin(phi), u' = R cos(phi) turns the second-order
equation into a scalar phase flow plus a driven log-amplitude, which is
what every downstream solver here consumes.  The companion cartesian
integrator solves the same equation in (u, u') form with an independent
right-hand side, so agreement between the two routes is a real check and
not a tautology.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._integrator import DEFAULT_ATOL, DEFAULT_RTOL, PathResult, SegmentedPath
from .piecewise import PiecewiseLinear

__all__ = [
    "PruferTrajectory",
    "CartesianTrajectory",
    "SturmReport",
    "integrate_prufer",
    "integrate_solution",
    "phase_theta_derivative",
    "phase_lambda_derivative",
    "phase_energy_derivative",
    "sturm_compare",
]


@dataclass
class PruferTrajectory:
    """Samples of the phase flow along a traversal.

    ``phase`` is the continuous (unwrapped) phase, ``log_amplitude`` is
    ln R relative to R = r0 at the start point, and the integral columns
    are signed accumulations of w u^2 and u^2 from the start.
    """

    x: np.ndarray
    phase: np.ndarray
    log_amplitude: np.ndarray
    int_weight: np.ndarray
    int_u2: np.ndarray
    r0: float = 1.0

    @property
    def u(self) -> np.ndarray:
        return self.r0 * np.exp(self.log_amplitude) * np.sin(self.phase)

    @property
    def du(self) -> np.ndarray:
        return self.r0 * np.exp(self.log_amplitude) * np.cos(self.phase)

    @property
    def end_phase(self) -> float:
        return float(self.phase[-1])

    @property
    def end_log_amplitude(self) -> float:
        return float(self.log_amplitude[-1])

    def amplitude(self, scale: bool = True) -> np.ndarray:
        r = np.exp(self.log_amplitude)
        return self.r0 * r if scale else r

    def write_csv(self, path) -> None:
        u, du = self.u, self.du
        with open(path, "w") as fh:
            fh.write("x,phase,log_amplitude,u,du\n")
            for i in range(self.x.size):
                fh.write(f"{self.x[i]!r},{self.phase[i]!r},{self.log_amplitude[i]!r},"
                         f"{u[i]!r},{du[i]!r}\n")


@dataclass
class CartesianTrajectory:
    x: np.ndarray
    u: np.ndarray
    du: np.ndarray
    int_weight: np.ndarray
    int_u2: np.ndarray

    @property
    def norm_sq(self) -> np.ndarray:
        """u^2 + u'^2 pointwise (squared amplitude)."""
        return self.u ** 2 + self.du ** 2


def _grid(x_from: float, x_to: float, grid) -> np.ndarray | None:
    if grid is None:
        return None
    if np.isscalar(grid):
        return np.linspace(x_from, x_to, int(grid))
    return np.asarray(grid, dtype=float)


def integrate_prufer(q: PiecewiseLinear, E: float, x_from: float, x_to: float,
                     theta0: float, tol: float = DEFAULT_RTOL, grid=None,
                     weight: PiecewiseLinear | None = None) -> PruferTrajectory:
    """Integrate the phase flow for -u'' + (q - E) u = 0 from x_from to x_to.

    theta0 is the phase at x_from (R there is 1).  ``grid`` may be an int
    (number of equally spaced sample points) or an explicit array; the
    endpoint is always included.  ``weight`` adds the accumulator
    int w u^2 along the way.
    """
    pts = _grid(x_from, x_to, grid)
    path = SegmentedPath(q, weight, x_from, x_to, record_points=pts, rtol=tol, atol=tol)
    r = path.prufer(theta0, E=E)
    return PruferTrajectory(r.x, r.a, r.b, r.int_w, r.int_u)


def integrate_solution(q: PiecewiseLinear, E: float, x_from: float, x_to: float,
                       u0: float, du0: float, tol: float = DEFAULT_RTOL, grid=None,
                       weight: PiecewiseLinear | None = None) -> CartesianTrajectory:
    """Integrate -u'' + (q - E) u = 0 in (u, u') form; independent of the phase route."""
    if u0 == 0.0 and du0 == 0.0:
        raise ValueError("initial data must be nonzero")
    pts = _grid(x_from, x_to, grid)
    path = SegmentedPath(q, weight, x_from, x_to, record_points=pts, rtol=tol, atol=tol)
    r = path.cartesian(u0, du0, E=E)
    return CartesianTrajectory(r.x, r.a, r.b, r.int_w, r.int_u)


def _phase_end(q, E, x_from, x_to, theta0, tol, lam=0.0, weight=None) -> PathResult:
    path = SegmentedPath(q, weight, x_from, x_to, rtol=tol, atol=tol)
    return path.prufer(theta0, E=E, lam=lam)


def _fd_tol(tol: float, h: float) -> float:
    # The difference quotient divides integrator noise by 2h, so the two
    # probe runs must be solved below the h^2 truncation scale or the
    # central difference degenerates into noise.
    return min(tol, 1e-4 * h * h)


def phase_theta_derivative(q: PiecewiseLinear, E: float, x_from: float, x_to: float,
                           theta0: float, h: float = 1e-4,
                           tol: float = DEFAULT_RTOL) -> tuple[float, float]:
    """d phi(x_to)/d theta0: central difference vs the 1/R^2 identity."""
    path = SegmentedPath(q, None, x_from, x_to, rtol=tol, atol=tol)
    base = path.prufer(theta0, E=E, want_integrals=False)
    ft = _fd_tol(tol, h)
    probe = SegmentedPath(q, None, x_from, x_to, rtol=ft, atol=ft)
    hi = probe.prufer(theta0 + h, E=E, want_integrals=False)
    lo = probe.prufer(theta0 - h, E=E, want_integrals=False)
    numeric = (hi.a[-1] - lo.a[-1]) / (2.0 * h)
    analytic = math.exp(-2.0 * base.b[-1])
    return numeric, analytic


def phase_lambda_derivative(q: PiecewiseLinear, v: PiecewiseLinear, lam: float,
                            E: float, x_from: float, x_to: float, theta0: float,
                            h: float = 1e-4, tol: float = DEFAULT_RTOL) -> tuple[float, float]:
    """d phi(x_to)/d lam for potential q + lam v vs -R^-2 int v u^2."""
    path = SegmentedPath(q, v, x_from, x_to, rtol=tol, atol=tol)
    base = path.prufer(theta0, E=E, lam=lam)
    ft = _fd_tol(tol, h)
    probe = SegmentedPath(q, v, x_from, x_to, rtol=ft, atol=ft)
    hi = probe.prufer(theta0, E=E, lam=lam + h, want_integrals=False)
    lo = probe.prufer(theta0, E=E, lam=lam - h, want_integrals=False)
    numeric = (hi.a[-1] - lo.a[-1]) / (2.0 * h)
    analytic = -math.exp(-2.0 * base.b[-1]) * base.int_w[-1]
    return numeric, analytic


def phase_energy_derivative(q: PiecewiseLinear, E: float, x_from: float, x_to: float,
                            theta0: float, h: float = 1e-4,
                            tol: float = DEFAULT_RTOL) -> tuple[float, float]:
    """d phi(x_to)/d E vs +R^-2 int u^2."""
    path = SegmentedPath(q, None, x_from, x_to, rtol=tol, atol=tol)
    base = path.prufer(theta0, E=E)
    ft = _fd_tol(tol, h)
    probe = SegmentedPath(q, None, x_from, x_to, rtol=ft, atol=ft)
    hi = probe.prufer(theta0, E=E + h, want_integrals=False)
    lo = probe.prufer(theta0, E=E - h, want_integrals=False)
    numeric = (hi.a[-1] - lo.a[-1]) / (2.0 * h)
    analytic = math.exp(-2.0 * base.b[-1]) * base.int_u[-1]
    return numeric, analytic


@dataclass
class SturmReport:
    ordered: bool
    min_gap: float
    x_min: float
    grid: np.ndarray
    phase_low: np.ndarray   # phase of the larger-potential solution
    phase_high: np.ndarray  # phase of the smaller-potential solution


def sturm_compare(q1: PiecewiseLinear, q2: PiecewiseLinear, E: float,
                  theta1: float, theta2: float, x_from: float, x_to: float,
                  n_check: int = 257, tol: float = DEFAULT_RTOL,
                  slack: float = 1e-8) -> SturmReport:
    """Phase comparison: q1 >= q2 and theta2 >= theta1 force phi2 >= phi1.

    Preconditions are checked exactly (piecewise-linear minimum of q1 - q2
    is attained at piece endpoints).  The report carries the minimum of
    phi2 - phi1 over a shared sample grid.
    """
    if theta2 < theta1:
        raise ValueError("need theta2 >= theta1")
    lo, hi = (x_from, x_to) if x_from < x_to else (x_to, x_from)
    diff = q1 + q2.scale(-1.0)
    if diff.restrict(lo, hi).min_value() < -1e-12:
        raise ValueError("need q1 >= q2 on the interval")
    t1 = integrate_prufer(q1, E, x_from, x_to, theta1, tol=tol, grid=n_check)
    t2 = integrate_prufer(q2, E, x_from, x_to, theta2, tol=tol, grid=n_check)
    gap = t2.phase - t1.phase
    i = int(np.argmin(gap))
    return SturmReport(bool(gap[i] >= -slack), float(gap[i]), float(t1.x[i]),
                       t1.x, t1.phase, t2.phase)
