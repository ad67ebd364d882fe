"""Finite-volume Dirichlet spectra on [-L, L] via phase shooting.

The left-anchored phase phi(x, E) (phi = 0 at -L) is strictly increasing
in E at the right end, and E is the k-th Dirichlet eigenvalue exactly
when phi(L, E) = k pi.  Eigenvalue counting is therefore floor(phi/pi)
and individual eigenvalues come from bisection, which is robust no matter
how clustered the spectrum is.  A second-order finite-difference matrix
oracle (with Richardson extrapolation in the mesh) provides an
independent route to the same numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson
from scipy.linalg import eigh_tridiagonal

from ._integrator import DEFAULT_ATOL, DEFAULT_RTOL, SegmentedPath
from .model import Model, box_potential

__all__ = [
    "BoxProblem",
    "EigenPair",
    "PhaseProfile",
    "phase_at_right_end",
    "count_eigenvalues_below",
    "find_eigenvalues_in_window",
    "eigenfunction_phase_profile",
    "dense_oracle_eigenvalues",
]


class BoxProblem:
    """Prepared potential on [-L, L] for repeated solves at many energies.

    Integer sites are always recorded, giving site phases, site log
    amplitudes and the running integrals of F u^2 and u^2 (F = unweighted
    tile of the single-site profile), from which per-cell masses follow
    by differencing.
    """

    def __init__(self, model: Model, omega, L: int,
                 rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL):
        self.model = model
        self.omega = np.asarray(omega, dtype=float)
        self.L = int(L)
        self.q, self.f_tile = box_potential(model, self.omega, self.L)
        self.sites = np.arange(-self.L, self.L + 1, dtype=float)
        self.rtol, self.atol = rtol, atol
        self._fwd = SegmentedPath(self.q, self.f_tile, -self.L, self.L,
                                  record_points=self.sites, rtol=rtol, atol=atol)
        self._bwd = SegmentedPath(self.q, self.f_tile, self.L, -self.L,
                                  record_points=self.sites, rtol=rtol, atol=atol)
        self._fine = {}

    def right_phase(self, E: float) -> float:
        """Unwrapped phase at +L for the solution anchored at -L (theta = 0)."""
        return float(self._fwd.prufer(0.0, E=E, want_integrals=False).a[-1])

    def forward_sites(self, E: float):
        """Site records of the left-anchored solution (phase, ln R, I_F, I_u)."""
        return self._fwd.prufer(0.0, E=E)

    def backward_sites(self, E: float):
        """Site records of the right-anchored solution, traversal L -> -L."""
        return self._bwd.prufer(0.0, E=E)

    def _fine_path(self, per_cell: int) -> SegmentedPath:
        if per_cell not in self._fine:
            grid = np.linspace(-self.L, self.L, 2 * self.L * per_cell + 1)
            self._fine[per_cell] = SegmentedPath(self.q, self.f_tile, -self.L, self.L,
                                                 record_points=grid,
                                                 rtol=self.rtol, atol=self.atol)
        return self._fine[per_cell]

    def forward_fine(self, E: float, per_cell: int = 512):
        return self._fine_path(per_cell).prufer(0.0, E=E)


@dataclass
class EigenPair:
    """One Dirichlet eigenvalue with its normalized eigenfunction data.

    ``site_phase`` is  the unwrapped left-anchored phase at integer sites
    (site_phase[0] = 0, site_phase[-1] = index * pi up to solver error).
    ``cell_mass[i]`` is the integral of v^2 over cell [-L + i, -L + i + 1].
    """

    index: int
    energy: float
    grid: np.ndarray | None
    values: np.ndarray | None
    site_phase: np.ndarray
    cell_mass: np.ndarray
    norm_check: float
    boundary_flag: bool

    def local_norm(self, n: int) -> float:
        """L2 norm of v over cell [n-1, n] (cells n = -L+1 .. L)."""
        L = (self.site_phase.size - 1) // 2
        i = n + L - 1
        if not 0 <= i < self.cell_mass.size:
            raise ValueError(f"cell {n} outside the box")
        return math.sqrt(max(self.cell_mass[i], 0.0))


@dataclass
class PhaseProfile:
    """Interior site phases folded to the winding circle plus the branch index."""

    sites: np.ndarray
    theta: np.ndarray
    branch: int
    index: int


def phase_at_right_end(model: Model, omega, L: int, E: float,
                       tol: float = DEFAULT_RTOL) -> float:
    return BoxProblem(model, omega, L, rtol=tol, atol=tol).right_phase(E)


def count_eigenvalues_below(model: Model, omega, L: int, E: float,
                            tol: float = DEFAULT_RTOL) -> int:
    """Number of Dirichlet eigenvalues strictly below E (oscillation count)."""
    return int(math.floor(phase_at_right_end(model, omega, L, E, tol) / math.pi))


def _bisect_phase(box: BoxProblem, target: float, lo: float, hi: float,
                  tol: float) -> float:
    # right-end phase is strictly increasing in E
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if box.right_phase(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def find_eigenvalues_in_window(model: Model, omega, L: int,
                               tol: float = 1e-10, per_cell: int = 512,
                               want_grid: bool = True,
                               box: BoxProblem | None = None) -> list[EigenPair]:
    """All Dirichlet eigenvalues in [-E_max, E_max] with eigenfunction data.

    Eigenfunctions are normalized with composite Simpson quadrature on the
    stored grid (per_cell points per unit cell).  With want_grid=False the
    dense grid is skipped and only site data (phases, cell masses) is kept,
    which is what the Monte Carlo drivers need.
    """
    if box is None:
        box = BoxProblem(model, omega, L)
    e_max = model.e_max
    phi_lo = box.right_phase(-e_max)
    phi_hi = box.right_phase(e_max)
    k_min = max(1, int(math.ceil(phi_lo / math.pi)))
    k_max = int(math.floor(phi_hi / math.pi))
    out = []
    for k in range(k_min, k_max + 1):
        ek = _bisect_phase(box, k * math.pi, -e_max, e_max, tol)
        out.append(_build_pair(box, k, ek, per_cell, want_grid, tol))
    return out


def _build_pair(box: BoxProblem, k: int, energy: float, per_cell: int,
                want_grid: bool, tol: float) -> EigenPair:
    sites_run = box.forward_sites(energy)
    site_phase = sites_run.a.copy()
    mass_u = np.diff(sites_run.int_u)
    total = float(sites_run.int_u[-1])
    grid = None
    values = None
    norm_check = 1.0
    if want_grid:
        fine = box.forward_fine(energy, per_cell)
        grid = fine.x
        u = np.exp(fine.b) * np.sin(fine.a)
        nrm = math.sqrt(simpson(u * u, x=grid))
        values = u / nrm
        norm_check = float(simpson(values * values, x=grid))
        cell_mass = mass_u / (nrm * nrm)
    else:
        cell_mass = mass_u / total
    e_max = box.model.e_max
    boundary = (e_max - abs(energy)) < 10.0 * tol
    return EigenPair(k, float(energy), grid, values, site_phase, cell_mass,
                     norm_check, bool(boundary))


def eigenfunction_phase_profile(pair: EigenPair, n_winding: int) -> PhaseProfile:
    """Fold interior site phases to [0, 2 pi N) and attach j = k mod 2N."""
    span = 2.0 * math.pi * n_winding
    L = (pair.site_phase.size - 1) // 2
    sites = np.arange(-L + 1, L, dtype=int)
    theta = np.mod(pair.site_phase[1:-1], span)
    return PhaseProfile(sites, theta, pair.index % (2 * n_winding), pair.index)


def dense_oracle_eigenvalues(model: Model, omega, L: int, mesh_h: float = 1e-3,
                             pad: float = 1.0) -> np.ndarray:
    """Eigenvalues in the window from a finite-difference matrix, Richardson
    extrapolated over meshes h and h/2.

    The potential enters through exact cell averages over mesh intervals,
    which keeps the scheme second order even when the potential jumps;
    the h^2 terms then cancel in the (4 E_{h/2} - E_h) / 3 combination.
    """
    q, _ = box_potential(model, omega, L)
    lo, hi = -model.e_max - pad, model.e_max + pad

    def mesh_eigs(n: int) -> np.ndarray:
        h = 2.0 * L / n
        edges = -L + (np.arange(n + 1) - 0.5) * h  # averaging windows around nodes
        A = q.antiderivative(edges)
        qavg = (A[1:] - A[:-1]) / h  # cell average around node i (interior only used)
        d = 2.0 / h ** 2 + qavg[1:n]
        e = np.full(n - 2, -1.0 / h ** 2)
        vals = eigh_tridiagonal(d, e, select="v", select_range=(lo, hi),
                                eigvals_only=True)
        return np.sort(vals)

    n0 = max(4, int(round(2 * L / mesh_h)))
    e1 = mesh_eigs(n0)
    e2 = mesh_eigs(2 * n0)
    m = min(e1.size, e2.size)
    ex = (4.0 * e2[:m] - e1[:m]) / 3.0
    return ex[np.abs(ex) <= model.e_max]
