"""Disorder-averaged correlators, decay fits, and kernel-side decay rates.

The central quantity is the finite-volume correlator: the disorder
average of sum_k |chi_x v_k| |chi_y v_k| over eigenpairs in the energy
window, which dominates the localized overlap of spectral projections
between unit cells x and y.  Monte Carlo estimates of its decay in
|x - y| are fitted to an exponential and compared with the rate implied
by the single-cell contraction norm, eta = ln(1 / gamma).  On small
boxes the two pipelines are tied together at fixed energy: a quadrature
evaluation of the phase-space correlator density is checked against the
discretized inner-product bound assembled from the cell kernels.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import simpson
from scipy.linalg import eigh, svdvals

from ._integrator import DEFAULT_RTOL
from .kernels import CellMap, build_kernel_bundle, norm_2_to_2
from .model import Model, derive_seed, sample_couplings
from .spectral import EigenPair, BoxProblem, find_eigenvalues_in_window

__all__ = [
    "CorrelatorSeries",
    "DecayFit",
    "OperatorBoundRate",
    "BoundCheckReport",
    "correlator_summand",
    "estimate_rho",
    "correlator_series",
    "decay_fit",
    "operator_bound_rate",
    "dynamical_moment",
    "rho_tensor_quadrature",
    "fixed_energy_bound_check",
    "fixed_energy_bound_series",
]


# ---------------------------------------------------------------------------
# per-realization summand

def correlator_summand(pairs: list[EigenPair], x: int, y: int) -> float:
    """Sum over window eigenpairs of the cell-mass products.

    Each term is ||chi_x v_k|| * ||chi_y v_k|| with chi_x the indicator
    of [x-1, x]; every factor is at most 1 for normalized v_k, so the sum
    is bounded by the number of window eigenvalues.
    """
    return float(sum(p.local_norm(x) * p.local_norm(y) for p in pairs))


# ---------------------------------------------------------------------------
# Monte Carlo series

@dataclass
class CorrelatorSeries:
    """Monte Carlo estimates of the correlator at fixed L for several n."""

    distances: list[int]
    means: np.ndarray
    std_errors: np.ndarray
    sample_count: int
    L: int
    e_max: float
    seed: int
    mean_pair_count: float


def _sample_row(model: Model, L: int, distances, seed: int, idx: int,
                tol: float) -> np.ndarray:
    omega = sample_couplings(model.coupling, 2 * L, derive_seed(seed, idx))
    pairs = find_eigenvalues_in_window(model, omega, L, tol=tol,
                                       want_grid=False)
    row = np.empty(len(distances) + 1)
    row[:-1] = [correlator_summand(pairs, 1, n) for n in distances]
    row[-1] = len(pairs)
    return row


def _sample_chunk(args) -> tuple[np.ndarray, np.ndarray]:
    model, L, distances, seed, indices, tol = args
    block = np.empty((len(indices), len(distances) + 1))
    for r, idx in enumerate(indices):
        block[r] = _sample_row(model, L, distances, seed, idx, tol)
    return np.asarray(indices), block


_BATCHES = 20


def correlator_series(model: Model, L: int, distances, samples: int,
                      seed: int, tol: float = 1e-10,
                      workers: int = 1) -> CorrelatorSeries:
    """One Monte Carlo pass over disorder, all distances at once.

    Seeds are derived per sample index, and the reduction runs in fixed
    index order, so the result is identical for any worker count.
    Standard errors use batch means over 20 round-robin batches, which
    is robust against the heavy upper tail of the summand.
    """
    distances = [int(n) for n in distances]
    if samples < 2:
        raise ValueError("need at least 2 samples")
    for n in distances:
        if not 1 <= n <= L:
            raise ValueError(f"distance {n} outside 1..L = {L}")
    table = np.empty((samples, len(distances) + 1))
    if workers <= 1:
        for idx in range(samples):
            table[idx] = _sample_row(model, L, distances, seed, idx, tol)
    else:
        chunks = np.array_split(np.arange(samples), 4 * workers)
        jobs = [(model, L, distances, seed, list(c), tol)
                for c in chunks if len(c)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for indices, block in pool.map(_sample_chunk, jobs):
                table[indices] = block

    vals = table[:, :-1]
    means = np.add.reduce(vals, axis=0) / samples
    n_batch = min(_BATCHES, samples)
    batch_ids = np.arange(samples) % n_batch
    bmeans = np.empty((n_batch, len(distances)))
    for b in range(n_batch):
        sel = vals[batch_ids == b]
        bmeans[b] = np.add.reduce(sel, axis=0) / sel.shape[0]
    ses = bmeans.std(axis=0, ddof=1) / math.sqrt(n_batch)
    return CorrelatorSeries(distances, means, ses, samples, int(L),
                            float(model.e_max), int(seed),
                            float(table[:, -1].mean()))


def estimate_rho(model: Model, L: int, x: int, y: int, samples: int,
                 seed: int, tol: float = 1e-10,
                 workers: int = 1) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the correlator summand.

    The summand is evaluated at cells (x, y); x = 1 recovers the
    left-anchored correlator the decay study uses.
    """
    if x != 1:
        # generic pair: run a bespoke pass (the series driver fixes x = 1)
        if samples < 2:
            raise ValueError("need at least 2 samples")
        vals = np.empty(samples)
        for idx in range(samples):
            omega = sample_couplings(model.coupling, 2 * L,
                                     derive_seed(seed, idx))
            pairs = find_eigenvalues_in_window(model, omega, L, tol=tol,
                                               want_grid=False)
            vals[idx] = correlator_summand(pairs, x, y)
        n_batch = min(_BATCHES, samples)
        ids = np.arange(samples) % n_batch
        bm = np.array([vals[ids == b].mean() for b in range(n_batch)])
        return float(vals.mean()), float(bm.std(ddof=1) / math.sqrt(n_batch))
    series = correlator_series(model, L, [y], samples, seed, tol=tol,
                               workers=workers)
    return float(series.means[0]), float(series.std_errors[0])


# ---------------------------------------------------------------------------
# exponential decay fit

@dataclass
class DecayFit:
    """Weighted log-linear fit mean(n) ~ amplitude * exp(-rate * n)."""

    amplitude: float
    rate: float
    r_squared: float
    rate_std_error: float
    fit_window: list[int]
    dropped: list[int]


def decay_fit(series: CorrelatorSeries, min_distance: int = 3) -> DecayFit:
    """Least squares on (n, ln mean), weighted by the relative errors.

    Distances below min_distance are excluded (the decay law is
    asymptotic in n and the first cells sit in a transient regime);
    non-positive means cannot be logged and are dropped and reported.
    """
    keep, dropped = [], []
    for i, n in enumerate(series.distances):
        if n < min_distance:
            continue
        (keep if series.means[i] > 0.0 else dropped).append(i)
    if len(keep) < 3:
        raise ValueError("need at least 3 positive means beyond min_distance")
    ns = np.array([series.distances[i] for i in keep], dtype=float)
    mvals = series.means[keep]
    ses = series.std_errors[keep]
    ys = np.log(mvals)
    rel = np.divide(ses, mvals, out=np.zeros_like(ses), where=mvals > 0)
    w = np.where(rel > 0, 1.0 / np.maximum(rel, 1e-12) ** 2, 1.0)
    if not (rel > 0).all():
        w = np.ones_like(ys)          # deterministic input: unweighted
    X = np.column_stack([np.ones_like(ns), ns])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], ys * sw, rcond=None)
    resid = ys - X @ coef
    ss_res = float(w @ resid ** 2)
    ybar = float(w @ ys / w.sum())
    ss_tot = float(w @ (ys - ybar) ** 2)
    r2 = 1.0 if ss_tot <= 1e-30 else 1.0 - ss_res / ss_tot
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    if (rel > 0).all():
        slope_se = math.sqrt(cov[1, 1])
    else:
        dof = max(len(keep) - 2, 1)
        slope_se = math.sqrt(cov[1, 1] * ss_res / dof)
    return DecayFit(float(math.exp(coef[0])), float(-coef[1]), float(r2),
                    float(slope_se),
                    [series.distances[i] for i in keep],
                    [series.distances[i] for i in dropped])


# ---------------------------------------------------------------------------
# kernel-side decay rate

@dataclass
class OperatorBoundRate:
    """Max contraction norm over sampled cells and energies.

    ``contraction`` records whether the measured maximum is below 1; when
    a coarse mesh pushes it above 1 the rate is reported as nan rather
    than raising, since this is a discretization artifact.
    """

    gamma: float
    eta_op: float
    cell_indices: list[int]
    e_grid: np.ndarray
    norms: np.ndarray
    m: int
    contraction: bool


def operator_bound_rate(model: Model, cell_indices, e_grid,
                        m: int = 400, tol: float = 1e-13) -> OperatorBoundRate:
    """gamma = max over (cell, E) of the discretized contraction norm."""
    cells = [int(i) for i in cell_indices]
    es = np.asarray(list(e_grid), dtype=float)
    if np.abs(es).max() > model.e_max:
        raise ValueError("energy grid exceeds the declared window")
    norms = np.empty((len(cells), es.size))
    for a, i in enumerate(cells):
        g = model.background.cell(i)
        for b, e in enumerate(es):
            bundle = build_kernel_bundle(model, g, E=float(e), m=m, tol=tol)
            norms[a, b] = norm_2_to_2(bundle.contraction)
    gamma = float(norms.max())
    ok = gamma < 1.0
    eta = math.log(1.0 / gamma) if ok else math.nan
    return OperatorBoundRate(gamma, eta, cells, es, norms, int(m), ok)


# ---------------------------------------------------------------------------
# dynamical moment

def _psd_sqrt(g: np.ndarray) -> np.ndarray:
    vals, vecs = eigh(g)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _cell_gram(pairs: list[EigenPair], x: int) -> np.ndarray:
    grid = pairs[0].grid
    mask = (grid >= x - 1.0) & (grid <= float(x))
    sub = grid[mask]
    vm = np.array([p.values[mask] for p in pairs])
    gram = np.empty((len(pairs), len(pairs)))
    for k in range(len(pairs)):
        for l in range(k + 1):
            gram[k, l] = gram[l, k] = simpson(vm[k] * vm[l], x=sub)
    return gram


def dynamical_moment(pairs: list[EigenPair], x: int, y: int, t: float) -> float:
    """Norm of the time-evolved, window-projected overlap operator.

    The operator chi_x exp(-itH) P chi_y has rank at most the number of
    window eigenpairs; its norm is the top singular value of
    G_x^(1/2) diag(exp(-i t E_k)) G_y^(1/2) built from the Gram matrices
    of the eigenfunctions restricted to the two cells.  Eigenpairs must
    carry their dense grids.
    """
    if not pairs:
        return 0.0
    if pairs[0].grid is None:
        raise ValueError("dynamical moment needs eigenfunction grids")
    gx = _psd_sqrt(_cell_gram(pairs, x))
    gy = _psd_sqrt(_cell_gram(pairs, y))
    phases = np.exp(-1j * t * np.array([p.energy for p in pairs]))
    mat = gx @ np.diag(phases) @ gy
    return float(svdvals(mat)[0])


# ---------------------------------------------------------------------------
# brute-force oracle

def rho_tensor_quadrature(model: Model, L: int, x: int, y: int,
                          nodes: int = 15, tol: float = 1e-10) -> float:
    """Tensor Gauss-Legendre average of the summand over the couplings.

    Deterministic oracle for small boxes: the summand is smooth in omega
    away from window-entry events, so a moderate per-coupling rule
    resolves the 2L-dimensional average.  Cost grows as nodes^(2L).
    """
    lo, hi = model.coupling.support
    gx, gw = leggauss(nodes)
    pts = 0.5 * (hi - lo) * gx + 0.5 * (hi + lo)
    wts = 0.5 * (hi - lo) * gw * np.asarray(model.coupling(pts))
    dims = 2 * L
    total = 0.0
    omega = np.empty(dims)
    for flat in range(nodes ** dims):
        key = flat
        wprod = 1.0
        for d in range(dims):
            key, r = divmod(key, nodes)
            omega[d] = pts[r]
            wprod *= wts[r]
        if wprod == 0.0:
            continue
        pairs = find_eigenvalues_in_window(model, omega, L, tol=tol,
                                           want_grid=False)
        if pairs:
            total += wprod * correlator_summand(pairs, x, y)
    return float(total)


# ---------------------------------------------------------------------------
# fixed-energy bound: quadrature lhs vs operator rhs

@dataclass
class BoundCheckReport:
    """Both sides of the fixed-energy correlator bound on one box."""

    lhs: float
    rhs: float
    energy: float
    L: int
    n: int
    constant: float
    j_values: list[int]
    rhs_inner: np.ndarray
    lhs_evaluations: int


def _apriori_constant(model: Model) -> float:
    """exp of the cellwise integral bound on |1 + q - E|."""
    f_l1 = model.site.table.integral()
    return math.exp(1.0 + model.background.sup_bound
                    + model.coupling.bound * f_l1 + model.e_max)


def _lhs_fixed_energy(model: Model, L: int, n_list, E: float, n_nodes: int,
                      j_values, rtol: float) -> tuple[dict, int]:
    """Phase-space correlator density by support-adapted quadrature.

    The phase integral over the (2L-1)-torus is pulled back, cell by
    cell, to an integral over the couplings of the interior cells: each
    interior phase theta_i is the image of theta_{i-1} under the forward
    cell flow, and d theta_i / d lambda_i contributes the local mass
    over the squared end amplitude.  Those Jacobian factors cancel
    almost all amplitude terms of the integrand, leaving a product of
    right-anchored quantities that one forward and one backward box
    sweep deliver.  The boundary cell at +L stays a constraint: for each
    j the coupling that steers the phase onto j pi either exists (and
    weighs the point by the density there) or the point drops out.
    """
    lo, hi = model.coupling.support
    h = (hi - lo) / n_nodes
    lam_nodes = lo + (np.arange(n_nodes) + 0.5) * h
    dens = np.asarray(model.coupling(lam_nodes), dtype=float)
    cms = {i: CellMap(model, model.background.cell(i), E, rtol=rtol, atol=rtol)
           for i in range(-L + 1, L + 1)}
    last = cms[L]
    span = model.torus_span
    sweeps = {j: last.sweep(j * math.pi) for j in j_values}
    guesses = {j: None for j in j_values}
    totals = {nn: 0.0 for nn in n_list}
    evals = 0

    def leaf(theta_end: float, weight: float, prefix: list[float]):
        nonlocal evals
        for j in j_values:
            slo, shi = sweeps[j]
            rep = slo + math.fmod(theta_end - slo, span)
            if rep < slo:
                rep += span
            if rep > shi:
                continue
            lam2, _ = last.invert(j * math.pi, rep, -last.bound, last.bound,
                                  guess=guesses[j], tol=1e-12)
            guesses[j] = lam2
            rv2 = float(model.coupling(lam2))
            if rv2 <= 0.0:
                continue
            omega = np.array(prefix + [lam2])
            box = BoxProblem(model, omega, L, rtol=rtol, atol=rtol)
            fwd = box.forward_sites(E)
            bwd = box.backward_sites(E)
            mass_fwd = np.diff(fwd.int_w)
            rev_b = bwd.b[::-1]
            mass_bwd = np.diff(bwd.int_w[::-1])
            u2_bwd = np.diff(bwd.int_u[::-1])
            log_common = -math.log(mass_bwd[2 * L - 1])
            for i in range(1, L):
                log_common += (2.0 * (rev_b[i + L] - fwd.b[i + L])
                               + math.log(mass_fwd[i + L - 1])
                               - math.log(mass_bwd[i + L - 1]))
            evals += 1
            for nn in n_list:
                pu = 0.5 * (math.log(u2_bwd[nn + L - 1]) + math.log(u2_bwd[L]))
                totals[nn] += weight * rv2 * math.exp(log_common + pu)

    def descend(level: int, theta_prev: float, weight: float,
                prefix: list[float]):
        cell = cms[-L + 1 + level]
        for t in range(n_nodes):
            if dens[t] <= 0.0:
                continue
            res = cell.forward(theta_prev, lam_nodes[t], want_integrals=False)
            theta = float(res.a[-1])
            w2 = weight * dens[t] * h
            if level == 2 * L - 2:
                leaf(theta, w2, prefix + [lam_nodes[t]])
            else:
                descend(level + 1, theta, w2, prefix + [lam_nodes[t]])

    descend(0, 0.0, 1.0, [])
    return totals, evals


def _rhs_fixed_energy(model: Model, L: int, n_list, E: float, m: int,
                      j_values, tol: float) -> dict:
    """Discretized inner-product bound, one vector chain per side.

    Left chain: the transition row at the left edge propagated by the
    adjoint operators of cells -L+2 .. 0.  Right chain per j: the edge
    column of cell L propagated by weighted-kernel factors down to cell
    n+1 and contraction factors through cells n .. 1.  When n = L the
    boundary column itself is of contraction type.
    """
    bundles = {}
    for i in range(-L + 1, L + 1):
        g = model.background.cell(i)
        key = (tuple(np.round(g.breaks, 12)), tuple(np.round(g.c0, 12)),
               tuple(np.round(g.c1, 12)))
        if key not in bundles:
            bundles[key] = build_kernel_bundle(model, g, E=E, m=m, tol=tol)
        bundles[i] = bundles[key]
    wts = bundles[-L + 1].weighted.weights
    left = bundles[-L + 1].edge_row.copy()
    for i in range(-L + 2, 1):
        left = bundles[i].transition_adjoint.apply(left)
    const = _apriori_constant(model)
    out = {}
    for nn in n_list:
        inner = np.empty(len(j_values))
        for a, j in enumerate(j_values):
            if nn == L:
                vec = bundles[L].contraction_edge_columns[:, j].copy()
            else:
                vec = bundles[L].edge_columns[:, j].copy()
            for i in range(L - 1, nn, -1):
                vec = bundles[i].weighted.apply(vec)
            for i in range(min(nn, L - 1), 0, -1):
                vec = bundles[i].contraction.apply(vec)
            inner[a] = float(np.sum(wts * left * vec))
        out[nn] = (const * float(inner.sum()), inner)
    return out


def fixed_energy_bound_series(model: Model, L: int, n_list, E: float,
                              n_nodes: int = 16, m: int = 400,
                              j_values=None, tol: float = 1e-13,
                              rtol: float = DEFAULT_RTOL
                              ) -> list[BoundCheckReport]:
    """Bound check for several distances n sharing one quadrature pass."""
    if L > 3:
        raise ValueError("quadrature budget exceeded for L > 3")
    n_list = [int(nn) for nn in n_list]
    for nn in n_list:
        if not 1 <= nn <= L:
            raise ValueError(f"distance {nn} outside 1..L = {L}")
    if j_values is None:
        j_values = list(range(2 * model.n_winding))
    j_values = [int(j) for j in j_values]
    lhs, evals = _lhs_fixed_energy(model, L, n_list, E, n_nodes, j_values,
                                   rtol)
    rhs = _rhs_fixed_energy(model, L, n_list, E, m, j_values, tol)
    const = _apriori_constant(model)
    return [BoundCheckReport(float(lhs[nn]), rhs[nn][0], float(E), int(L),
                             nn, const, j_values, rhs[nn][1], evals)
            for nn in n_list]


def fixed_energy_bound_check(model: Model, L: int, n: int, E: float,
                             n_nodes: int = 16, m: int = 400,
                             j_values=None, tol: float = 1e-13,
                             rtol: float = DEFAULT_RTOL) -> BoundCheckReport:
    """Quadrature lhs and operator rhs of the fixed-energy bound."""
    return fixed_energy_bound_series(model, L, [n], E, n_nodes=n_nodes, m=m,
                                     j_values=j_values, tol=tol,
                                     rtol=rtol)[0]
