"""Single-cell transfer kernels and their Nystrom discretization.

A unit cell carries the potential g + lam f - E on [-1, 0].  Anchoring a
solution at the right end with phase alpha and flowing backward gives the
left-end phase beta(lam), which is strictly increasing in lam; inverting
it is the change of variables that turns coupling integrals into phase
integrals.  Each solved inversion yields, in one pass, the coupling
value, the left-end amplitude A = R(-1) of the right-anchored solution,
and the mass int f u^2, from which all kernels follow:

    transition kernel      r(lam) / mass          (rows integrate to 1)
    weighted kernel        A^2 r(lam) / mass      (columns integrate to 1)
    contraction kernel     A   r(lam) / mass      (L2 norm < 1)

Phases live on a circle of circumference 2 pi N, where N is the model's
winding bound; the kernels are invariant under the simultaneous shift of
both arguments by pi, which underlies the block diagonalization used to
compute the contraction norm.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import svdvals

from ._integrator import DEFAULT_ATOL, DEFAULT_RTOL, SegmentedPath
from .model import Model
from .piecewise import PiecewiseLinear, constant as pl_constant
from .spectral import BoxProblem

__all__ = [
    "wrap_phase",
    "circle_distance",
    "CouplingSolution",
    "CellSolutionPair",
    "CellMap",
    "solve_coupling",
    "cell_solutions",
    "contraction_kernel_value",
    "transition_kernel_values",
    "edge_functions",
    "DiscreteKernel",
    "KernelBundle",
    "build_kernel_bundle",
    "discretize",
    "norm_1_to_1",
    "norm_2_to_2",
    "kernel_bound_constants",
    "block_decompose",
    "norm_continuity_probe",
    "large_coupling_amplitude",
    "structured_determinant",
    "structured_matrix",
    "jacobian_check",
]


def wrap_phase(value: float, n_winding: int) -> float:
    """Fold a phase to [0, 2 pi N)."""
    span = 2.0 * math.pi * n_winding
    return float(np.mod(value, span))


def circle_distance(a: float, b: float, n_winding: int) -> float:
    span = 2.0 * math.pi * n_winding
    d = abs(np.mod(a - b, span))
    return float(min(d, span - d))


@dataclass
class CouplingSolution:
    """Result of inverting the backward phase map in the coupling."""

    exists: bool
    value: float            # coupling lam with beta(lam) = beta_rep
    beta_rep: float         # representative of beta inside the reachable arc
    residual: float         # |beta(lam) - beta_rep| achieved
    amp_left: float         # R(-1) of the right-anchored solution
    mass: float             # int f u^2 for the right-anchored solution
    sweep: tuple[float, float]  # reachable arc [beta(-bound), beta(+bound)]


class CellMap:
    """Backward phase map of one unit cell, prepared for many inversions.

    g is the background slice on [-1, 0]; E is kept explicit so energy
    absorption (replacing (g, E) by (g - E, 0)) can be tested honestly.
    """

    def __init__(self, model: Model, g: PiecewiseLinear, E: float = 0.0,
                 search_pad: float = 1.0,
                 rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL):
        self.model = model
        self.g = g
        self.E = float(E)
        self.n_winding = model.n_winding
        self.span = model.torus_span
        self.bound = model.coupling.bound + search_pad
        f = model.site.table
        self._bwd = SegmentedPath(g, f, 0.0, -1.0, rtol=rtol, atol=atol)
        self._fwd = SegmentedPath(g, f, -1.0, 0.0, rtol=rtol, atol=atol)

    def backward(self, alpha: float, lam: float, want_integrals: bool = True):
        """Right-anchored solve: phase alpha at 0, traversal to -1."""
        return self._bwd.prufer(alpha, E=self.E, lam=lam,
                                want_integrals=want_integrals)

    def forward(self, beta: float, lam: float, want_integrals: bool = True):
        """Left-anchored solve: phase beta at -1, traversal to 0."""
        return self._fwd.prufer(beta, E=self.E, lam=lam,
                                want_integrals=want_integrals)

    def sweep(self, alpha: float) -> tuple[float, float]:
        """Reachable left-phase arc [beta(-bound), beta(+bound)]."""
        lo = self.backward(alpha, -self.bound, want_integrals=False).a[-1]
        hi = self.backward(alpha, +self.bound, want_integrals=False).a[-1]
        if hi - lo >= self.span:
            raise RuntimeError(
                f"phase sweep {hi - lo:.6f} covers the whole circle "
                f"(span {self.span:.6f}); winding bound too small")
        return float(lo), float(hi)

    def invert(self, alpha: float, beta_rep: float, lo: float, hi: float,
               guess: float | None = None, tol: float = 1e-13):
        """Solve beta(lam) = beta_rep by bracketed Newton on the monotone map.

        Returns (lam, end_state) where end_state is the final backward run
        (with integrals).  Assumes beta(lo') <= beta_rep <= beta(hi') on
        entry with lo' = -bound, hi' = +bound.
        """
        lam_lo, lam_hi = lo, hi
        x = guess if guess is not None and lam_lo < guess < lam_hi \
            else 0.5 * (lam_lo + lam_hi)
        r = None
        for _ in range(100):
            r = self.backward(alpha, x)
            t = r.a[-1] - beta_rep
            if abs(t) <= tol:
                return x, r
            if t < 0.0:
                lam_lo = x
            else:
                lam_hi = x
            mass = -r.int_w[-1]
            deriv = math.exp(-2.0 * r.b[-1]) * mass
            if deriv > 0.0:
                xn = x - t / deriv
            else:
                xn = 0.5 * (lam_lo + lam_hi)
            if not lam_lo < xn < lam_hi:
                xn = 0.5 * (lam_lo + lam_hi)
            if xn == x:
                return x, r
            x = xn
        raise RuntimeError(f"coupling inversion stalled at alpha={alpha}, "
                           f"beta={beta_rep}, residual={r.a[-1] - beta_rep:.3e}")

    def solve(self, beta: float, alpha: float, tol: float = 1e-13) -> CouplingSolution:
        """Full inversion for one (beta, alpha) pair on the winding circle."""
        lo, hi = self.sweep(alpha)
        rep = lo + np.mod(beta - lo, self.span)
        if rep > hi:
            return CouplingSolution(False, math.nan, float(rep), math.nan,
                                    math.nan, math.nan, (lo, hi))
        lam, r = self.invert(alpha, rep, -self.bound, self.bound, tol=tol)
        return CouplingSolution(True, float(lam), float(rep),
                                float(abs(r.a[-1] - rep)),
                                float(math.exp(r.b[-1])),
                                float(-r.int_w[-1]), (lo, hi))


def solve_coupling(model: Model, g: PiecewiseLinear, beta: float, alpha: float,
                   E: float = 0.0, tol: float = 1e-13,
                   search_pad: float = 1.0) -> CouplingSolution:
    return CellMap(model, g, E, search_pad=search_pad).solve(beta, alpha, tol=tol)


@dataclass
class CellSolutionPair:
    """Right- and left-anchored cell solutions for one solved transition.

    The right-anchored solution has amplitude 1 at x = 0 and phase alpha
    there; the left-anchored one has amplitude 1 at x = -1 and phase
    beta_rep.  They are positive multiples of each other; the reciprocity
    amp_right_at_left * amp_left_at_right = 1 and the pointwise relation
    u_right^2 = amp_right_at_left^2 u_left^2 are test invariants.
    """

    x: np.ndarray
    u_right: np.ndarray
    du_right: np.ndarray
    u_left: np.ndarray
    du_left: np.ndarray
    amp_right_at_left: float
    amp_left_at_right: float
    mass_right: float
    mass_left: float
    coupling: float
    alpha: float
    beta_rep: float


def cell_solutions(model: Model, g: PiecewiseLinear, beta: float, alpha: float,
                   E: float = 0.0, n_grid: int = 129,
                   tol: float = 1e-13) -> CellSolutionPair:
    cm = CellMap(model, g, E)
    sol = cm.solve(beta, alpha, tol=tol)
    if not sol.exists:
        raise ValueError("no coupling realizes this phase transition")
    grid = np.linspace(0.0, -1.0, n_grid)
    f = model.site.table
    pb = SegmentedPath(g, f, 0.0, -1.0, record_points=grid,
                       rtol=cm._bwd.rtol, atol=cm._bwd.atol)
    rb = pb.prufer(alpha, E=E, lam=sol.value)
    pf = SegmentedPath(g, f, -1.0, 0.0, record_points=grid[::-1],
                       rtol=cm._fwd.rtol, atol=cm._fwd.atol)
    rf = pf.prufer(sol.beta_rep, E=E, lam=sol.value)
    # present both on the ascending grid
    xs = rf.x
    ub = (np.exp(rb.b) * np.sin(rb.a))[::-1]
    dub = (np.exp(rb.b) * np.cos(rb.a))[::-1]
    uf = np.exp(rf.b) * np.sin(rf.a)
    duf = np.exp(rf.b) * np.cos(rf.a)
    mass_left = float(rf.int_w[-1])
    return CellSolutionPair(xs, ub, dub, uf, duf,
                            sol.amp_left, float(math.exp(rf.b[-1])),
                            sol.mass, mass_left, sol.value,
                            float(alpha), sol.beta_rep)


def transition_kernel_values(model: Model, g: PiecewiseLinear, beta: float,
                             alpha: float, E: float = 0.0,
                             tol: float = 1e-13) -> tuple[float, float]:
    """(transition, weighted) kernel values at one point; zero when the
    transition is unreachable or the coupling density vanishes there."""
    sol = CellMap(model, g, E).solve(beta, alpha, tol=tol)
    if not sol.exists:
        return 0.0, 0.0
    rv = float(model.coupling(sol.value))
    if rv <= 0.0:
        return 0.0, 0.0
    k1 = rv / sol.mass
    return k1, sol.amp_left ** 2 * k1


def contraction_kernel_value(model: Model, g: PiecewiseLinear, beta: float,
                             alpha: float, E: float = 0.0,
                             tol: float = 1e-13) -> float:
    sol = CellMap(model, g, E).solve(beta, alpha, tol=tol)
    if not sol.exists:
        return 0.0
    rv = float(model.coupling(sol.value))
    return sol.amp_left * rv / sol.mass if rv > 0.0 else 0.0


def edge_functions(model: Model, g: PiecewiseLinear, E: float = 0.0,
                   m: int = 400, tol: float = 1e-13):
    """Boundary vectors: columns theta -> weighted kernel at alpha = j pi,
    and the row theta -> transition kernel at beta = 0."""
    bundle = build_kernel_bundle(model, g, E=E, m=m, tol=tol)
    return bundle.edge_columns, bundle.edge_row


# ---------------------------------------------------------------------------
# discretization

@dataclass
class DiscreteKernel:
    """Midpoint-rule Nystrom discretization of an integral kernel.

    Action: (K F)(x_i) = sum_j weights[j] matrix[i, j] F(x_j).  ``domain``
    is "torus" (full winding circle) or "segment" ((0, pi) blocks).
    """

    nodes: np.ndarray
    weights: np.ndarray
    matrix: np.ndarray
    domain: str
    span: float
    n_winding: int

    def apply(self, vec: np.ndarray) -> np.ndarray:
        return self.matrix @ (self.weights * vec)


@dataclass
class KernelBundle:
    """All discretized cell operators from one assembly sweep.

    weighted / transition_adjoint / contraction share nodes and weights;
    edge_columns[:, j] samples the weighted kernel at alpha = j pi,
    contraction_edge_columns[:, j] the contraction kernel at the same
    boundary phases, and edge_row samples the transition kernel at
    beta = 0.  ``couplings`` holds the solved coupling per matrix entry
    (nan when unreachable).
    """

    weighted: DiscreteKernel
    transition_adjoint: DiscreteKernel
    contraction: DiscreteKernel
    edge_columns: np.ndarray
    contraction_edge_columns: np.ndarray
    edge_row: np.ndarray
    couplings: np.ndarray
    E: float
    m: int


def _midpoint_nodes(span: float, m: int):
    w = span / m
    return (np.arange(m) + 0.5) * w, w


def build_kernel_bundle(model: Model, g: PiecewiseLinear, E: float = 0.0,
                        m: int = 400, tol: float = 1e-13,
                        search_pad: float = 1.0,
                        rtol: float = DEFAULT_RTOL) -> KernelBundle:
    """Assemble all cell kernels on an m-point midpoint grid in one sweep.

    m must be divisible by 2N so that the midpoint grid is invariant under
    the pi shift, which the block diagonalization relies on.  For each
    column alpha the reachable arc of left phases is walked in increasing
    order with warm-started Newton inversions, so the cost is a few cell
    solves per nonzero entry.
    """
    nw = model.n_winding
    if m % (2 * nw) != 0:
        raise ValueError(f"m = {m} not divisible by 2 N = {2 * nw}")
    span = model.torus_span
    nodes, w = _midpoint_nodes(span, m)
    cm = CellMap(model, g, E, search_pad=search_pad, rtol=rtol, atol=rtol)
    pdf = model.coupling

    k1 = np.zeros((m, m))
    k2 = np.zeros((m, m))
    t1 = np.zeros((m, m))
    lam_mat = np.full((m, m), np.nan)
    edge_row = np.zeros(m)
    edge_cols = np.zeros((m, 2 * nw))
    edge_cols_c = np.zeros((m, 2 * nw))

    def column(alpha: float, targets: np.ndarray):
        """Solve the inversion for every reachable target left phase.

        Returns (indices, lam, amp, mass) for the reachable subset, in
        increasing order of the representative."""
        lo, hi = cm.sweep(alpha)
        reps = lo + np.mod(targets - lo, span)
        order = np.argsort(reps)
        idx_out, lam_out, amp_out, mass_out = [], [], [], []
        guess = None
        prev_rep = None
        prev_deriv = None
        for i in order:
            rep = reps[i]
            if rep > hi:
                break
            if guess is not None and prev_deriv and prev_deriv > 0:
                step = (rep - prev_rep) / prev_deriv
                g0 = guess + step
            else:
                g0 = guess
            lam, r = cm.invert(alpha, rep, -cm.bound, cm.bound, guess=g0, tol=tol)
            mass = -r.int_w[-1]
            amp = math.exp(r.b[-1])
            idx_out.append(int(i))
            lam_out.append(lam)
            amp_out.append(amp)
            mass_out.append(mass)
            guess = lam
            prev_rep = rep
            prev_deriv = math.exp(-2.0 * r.b[-1]) * mass
        return idx_out, lam_out, amp_out, mass_out

    # main sweep: all torus targets plus beta = 0 for the edge row
    targets = np.concatenate([nodes, [0.0]])
    for j, alpha in enumerate(nodes):
        idx, lams, amps, masses = column(alpha, targets)
        for i, lam, amp, mass in zip(idx, lams, amps, masses):
            rv = float(pdf(lam))
            if i == m:
                if rv > 0.0:
                    edge_row[j] = rv / mass
                continue
            lam_mat[i, j] = lam
            if rv > 0.0:
                base = rv / mass
                k1[i, j] = base
                k2[i, j] = amp * amp * base
                t1[i, j] = amp * base
    # boundary columns at alpha = j pi
    for jj in range(2 * nw):
        idx, lams, amps, masses = column(jj * math.pi, nodes)
        for i, lam, amp, mass in zip(idx, lams, amps, masses):
            rv = float(pdf(lam))
            if rv > 0.0:
                edge_cols[i, jj] = amp * amp * rv / mass
                edge_cols_c[i, jj] = amp * rv / mass

    weights = np.full(m, w)
    mk = lambda mat: DiscreteKernel(nodes, weights, mat, "torus", span, nw)
    return KernelBundle(mk(k2), mk(k1.T.copy()), mk(t1),
                        edge_cols, edge_cols_c, edge_row, lam_mat, float(E), m)


def discretize(kernel_fn, span: float, m: int, domain: str = "torus",
               n_winding: int = 1) -> DiscreteKernel:
    """Generic midpoint Nystrom discretization of a callable kernel(x, y)."""
    nodes, w = _midpoint_nodes(span, m)
    mat = np.empty((m, m))
    for j, y in enumerate(nodes):
        for i, x in enumerate(nodes):
            mat[i, j] = kernel_fn(x, y)
    return DiscreteKernel(nodes, np.full(m, w), mat, domain, span, n_winding)


# ---------------------------------------------------------------------------
# norms

def norm_1_to_1(k: DiscreteKernel) -> float:
    """L1 -> L1 operator norm: largest weighted absolute column sum."""
    return float(np.max(k.weights @ np.abs(k.matrix)))


def _similarity(k: DiscreteKernel) -> np.ndarray:
    s = np.sqrt(k.weights)
    return s[:, None] * k.matrix * s[None, :]


def norm_2_to_2(k: DiscreteKernel, method: str = "svd", cross_check: bool = False,
                power_iters: int = 5000, power_tol: float = 1e-12) -> float:
    """L2 -> L2 norm via the weighted similarity; svd or power iteration.

    With cross_check both methods run and a disagreement beyond 1e-10
    (relative to max(1, norm)) raises.
    """
    b = _similarity(k)
    sv = float(svdvals(b)[0]) if method == "svd" or cross_check else None
    pw = _power_norm(b, power_iters, power_tol) if method == "power" or cross_check else None
    if cross_check and abs(sv - pw) > 1e-10 * max(1.0, sv):
        raise ArithmeticError(f"norm methods disagree: svd {sv!r}, power {pw!r}")
    if method == "svd":
        return sv
    if method == "power":
        return pw
    raise ValueError(f"unknown method {method!r}")


def _power_norm(b: np.ndarray, iters: int, tol: float, block: int = 6) -> float:
    """Largest singular value by block power iteration on B^H B.

    A residual-based stop certifies |rho - lambda_max| <= residual, which
    keeps the estimate reliable even when the top singular values are
    nearly degenerate (the conjugate symmetry blocks produce such pairs).
    """
    n = b.shape[1]
    block = min(block, n)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((n, block))
    if np.iscomplexobj(b):
        x = x + 1j * rng.standard_normal((n, block))
    x, _ = np.linalg.qr(x)
    bh = b.conj().T
    rho = 0.0
    for it in range(iters):
        y = bh @ (b @ x)
        if it % 5 == 4 or it == iters - 1:
            h = x.conj().T @ y
            h = 0.5 * (h + h.conj().T)
            evals, vecs = np.linalg.eigh(h)
            rho = float(evals[-1])
            res = float(np.linalg.norm(y @ vecs[:, -1] - rho * (x @ vecs[:, -1])))
            if res <= tol * max(1.0, rho):
                break
        x, _ = np.linalg.qr(y)
    return math.sqrt(max(rho, 0.0))


def kernel_bound_constants(model: Model, bundle: KernelBundle) -> tuple[float, float]:
    """Measured envelope of the kernel ingredients over the coupling support.

    Returns (C1, C2): C1 = max of the squared left-end amplitude and C2 =
    min of the cell mass int f u^2, both over the grid entries where the
    coupling density is positive.  C1 finite and C2 > 0 keep every kernel
    value finite and bounded.
    """
    k1 = bundle.transition_adjoint.matrix.T
    on = k1 > 0.0
    if not on.any():
        raise ValueError("no kernel support on the grid")
    amp_sq = bundle.weighted.matrix[on] / k1[on]
    dens = np.asarray(model.coupling(bundle.couplings[on]), dtype=float)
    mass = dens / k1[on]
    return float(amp_sq.max()), float(mass.min())


def block_decompose(k: DiscreteKernel, n_winding: int | None = None) -> list[DiscreteKernel]:
    """Split a torus kernel into its 2N twisted blocks on (0, pi).

    Block j has kernel sum_n K(beta, alpha + n pi) exp(i pi j n / N) with
    both arguments in (0, pi); midpoint nodes align exactly across the
    pi shifts because m is divisible by 2N.
    """
    nw = k.n_winding if n_winding is None else n_winding
    m = k.matrix.shape[0]
    if k.domain != "torus":
        raise ValueError("block decomposition needs a full torus kernel")
    if m % (2 * nw) != 0:
        raise ValueError("grid not aligned with the pi shift")
    mseg = m // (2 * nw)
    rows = k.matrix[:mseg, :]
    out = []
    for j in range(2 * nw):
        mat = np.zeros((mseg, mseg), dtype=complex)
        for n in range(2 * nw):
            phase = cmath.exp(1j * math.pi * j * n / nw)
            mat += rows[:, n * mseg:(n + 1) * mseg] * phase
        out.append(DiscreteKernel(k.nodes[:mseg], k.weights[:mseg], mat,
                                  "segment", math.pi, nw))
    return out


@dataclass
class ContinuityProbe:
    base_norm: float
    absorbed_norm: float
    absorption_kernel_maxdiff: float
    epsilons: list[float]
    norm_shifts: list[float]


def norm_continuity_probe(model: Model, g: PiecewiseLinear,
                          perturbation: PiecewiseLinear, epsilons,
                          E: float = 0.0, m: int = 400) -> ContinuityProbe:
    """Contraction-norm stability under energy absorption and g perturbations.

    Compares the bundle at (g, E) with the bundle at (g - E, 0) entrywise,
    then reports |norm(g + eps p) - norm(g)| for each eps.
    """
    base = build_kernel_bundle(model, g, E=E, m=m)
    shifted_g = g + pl_constant(-E, -1.0, 0.0)
    absorbed = build_kernel_bundle(model, shifted_g, E=0.0, m=m)
    kdiff = float(np.max(np.abs(base.contraction.matrix - absorbed.contraction.matrix)))
    n0 = norm_2_to_2(base.contraction)
    shifts = []
    for eps in epsilons:
        gp = g + perturbation.scale(float(eps))
        b = build_kernel_bundle(model, gp, E=E, m=m)
        shifts.append(abs(norm_2_to_2(b.contraction) - n0))
    return ContinuityProbe(n0, norm_2_to_2(absorbed.contraction), kdiff,
                           [float(e) for e in epsilons], shifts)


def large_coupling_amplitude(model: Model, g: PiecewiseLinear, beta: float,
                             lambdas, E: float = 0.0,
                             rtol: float = DEFAULT_RTOL) -> np.ndarray:
    """ln R(0) of the left-anchored cell solution for each coupling value.

    Uses the phase/log-amplitude flow without quadratic accumulators, so
    couplings of order 10^4 stay in range.
    """
    f = model.site.table
    path = SegmentedPath(g, f, -1.0, 0.0, rtol=rtol, atol=rtol)
    out = []
    for lam in lambdas:
        r = path.prufer(beta, E=E, lam=float(lam), want_integrals=False)
        out.append(float(r.b[-1]))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# structured determinant and the Jacobian identity

def structured_matrix(a, b) -> np.ndarray:
    """Matrix with row i equal to a_i from the diagonal rightward and b_i
    strictly left of the diagonal.  a and b have equal length; b's first
    entry is never used (row 1 has nothing left of the diagonal)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.size
    if b.size != n:
        raise ValueError("a and b must have equal length (first b unused)")
    mat = np.empty((n, n))
    for i in range(n):
        mat[i, i:] = a[i]
        mat[i, :i] = b[i]
    return mat


def structured_determinant(a, b, cross_check: bool = True) -> float:
    """Closed-form determinant a_1 prod_{i>=2} (a_i - b_i) of the ladder
    matrix built by structured_matrix.

    With cross_check a dense determinant of the explicit matrix is
    computed and a disagreement beyond 1e-9 relative raises.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    closed = float(a[0] * np.prod(a[1:] - b[1:]))
    if cross_check:
        dense = float(np.linalg.det(structured_matrix(a, b)))
        scale = max(1.0, abs(closed))
        if abs(dense - closed) > 1e-9 * scale:
            raise ArithmeticError(
                f"structured determinant mismatch: closed {closed!r}, dense {dense!r}")
    return closed


@dataclass
class JacobianReport:
    energy: float
    numeric_det: float
    analytic_det: float
    rel_error: float
    fh_max_error: float     # Feynman-Hellmann row check
    index: int


def _bisect_index(box: BoxProblem, k: int, lo: float, hi: float, tol: float) -> float:
    target = k * math.pi
    flo, fhi = box.right_phase(lo), box.right_phase(hi)
    grow = 0
    while not (flo < target <= fhi):
        width = hi - lo
        lo -= width
        hi += width
        flo, fhi = box.right_phase(lo), box.right_phase(hi)
        grow += 1
        if grow > 8:
            raise RuntimeError(f"cannot bracket eigenvalue index {k}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if box.right_phase(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def jacobian_check(model: Model, omega, L: int, k: int, h: float = 1e-4,
                   e_tol: float = 1e-13) -> JacobianReport:
    """Finite-difference Jacobian of omega -> (E_k, theta profile) against
    the closed-form determinant from the two-sided solution data.

    Rows are ordered (E_k, theta_{-L+1}, ..., theta_{L-1}), columns by
    increasing cell index; this ordering makes the closed form positive.
    """
    omega = np.asarray(omega, dtype=float)
    box = BoxProblem(model, omega, L)
    e0 = _bisect_index(box, k, -model.e_max, model.e_max, e_tol)

    fwd = box.forward_sites(e0)
    bwd = box.backward_sites(e0)
    mass_fwd = np.diff(fwd.int_w)                  # cells -L+1 .. L, ascending
    lnr_fwd = fwd.b
    rev_b = bwd.b[::-1]
    mass_bwd = np.diff(bwd.int_w[::-1])
    total_u2 = float(-bwd.int_u[-1])

    log_num = float(np.sum(np.log(mass_fwd[:L])) + np.sum(np.log(mass_bwd[L:])))
    log_den = float(2.0 * np.sum(lnr_fwd[1:L + 1]) + 2.0 * np.sum(rev_b[L + 1:2 * L])
                    + math.log(total_u2))
    analytic = math.exp(log_num - log_den)

    dim = 2 * L
    jac = np.empty((dim, dim))
    span_pad = 2.0 * h * model.site.sup_norm() + 1e-6
    fh_err = 0.0
    for col in range(dim):
        thetas = {}
        energies = {}
        for sgn in (+1.0, -1.0):
            om = omega.copy()
            om[col] += sgn * h
            bx = BoxProblem(model, om, L)
            ek = _bisect_index(bx, k, e0 - span_pad, e0 + span_pad, e_tol)
            energies[sgn] = ek
            thetas[sgn] = bx.forward_sites(ek).a[1:-1]
        jac[1:, col] = (thetas[1.0] - thetas[-1.0]) / (2.0 * h)
        de = (energies[1.0] - energies[-1.0]) / (2.0 * h)
        jac[0, col] = de
        fh = mass_fwd[col] / float(fwd.int_u[-1])
        fh_err = max(fh_err, abs(de - fh))
    numeric = float(np.linalg.det(jac))
    rel = abs(numeric - analytic) / abs(analytic)
    return JacobianReport(e0, numeric, analytic, rel, fh_err, k)
