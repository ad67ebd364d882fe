"""Cell transfer kernels: inversion, discretization, norms, block structure."""

import math

import numpy as np
import pytest

from loclab import piecewise
from loclab.kernels import (
    CellMap,
    block_decompose,
    build_kernel_bundle,
    cell_solutions,
    circle_distance,
    contraction_kernel_value,
    discretize,
    edge_functions,
    jacobian_check,
    kernel_bound_constants,
    large_coupling_amplitude,
    norm_1_to_1,
    norm_2_to_2,
    norm_continuity_probe,
    solve_coupling,
    structured_determinant,
    structured_matrix,
    transition_kernel_values,
    wrap_phase,
)
from loclab.model import operator_suite_model, reference_model, sample_couplings

SUITE = operator_suite_model()
G0 = SUITE.background.cell(0)
SPAN = SUITE.torus_span
NW = SUITE.n_winding


@pytest.fixture(scope="module")
def small_bundle():
    return build_kernel_bundle(SUITE, G0, E=0.0, m=96)


@pytest.fixture(scope="module")
def big_bundle():
    return build_kernel_bundle(SUITE, G0, E=0.0, m=400)


def test_wrap_phase_and_circle_distance():
    assert abs(wrap_phase(SPAN + 0.3, NW) - 0.3) < 1e-12
    assert abs(wrap_phase(-0.25, NW) - (SPAN - 0.25)) < 1e-12
    assert circle_distance(0.1, 0.1 + SPAN, NW) < 1e-12
    # distance is symmetric and capped at half the circle
    assert abs(circle_distance(0.2, 1.7, NW) - circle_distance(1.7, 0.2, NW)) == 0.0
    assert circle_distance(0.0, 0.5 * SPAN + 1.0, NW) <= 0.5 * SPAN


def test_coupling_round_trip():
    cm = CellMap(SUITE, G0)
    rng = np.random.default_rng(8)
    for _ in range(20):
        lam0 = float(rng.uniform(-9.0, -2.6))
        alpha = float(rng.uniform(0.0, SPAN))
        beta = cm.backward(alpha, lam0, want_integrals=False).a[-1]
        sol = solve_coupling(SUITE, G0, beta, alpha)
        assert sol.exists
        assert abs(sol.value - lam0) < 1e-10
        assert sol.residual < 1e-12


def test_cell_map_sweep_and_invert():
    cm = CellMap(SUITE, G0)
    lo, hi = cm.sweep(1.3)
    assert hi > lo
    assert hi - lo < SPAN
    rep = 0.5 * (lo + hi)
    lam, end = cm.invert(1.3, rep, -cm.bound, cm.bound)
    assert -cm.bound < lam < cm.bound
    assert abs(end.a[-1] - rep) < 1e-12
    # the backward phase map is increasing in the coupling
    b1 = cm.backward(1.3, lam - 0.5, want_integrals=False).a[-1]
    b2 = cm.backward(1.3, lam + 0.5, want_integrals=False).a[-1]
    assert b1 < rep < b2


def test_cell_solution_reciprocity():
    pair = cell_solutions(SUITE, G0, beta=2.0, alpha=1.3)
    # the two anchored solutions are positive multiples of each other
    assert abs(pair.amp_right_at_left * pair.amp_left_at_right - 1.0) < 1e-9
    assert np.max(np.abs(pair.u_right - pair.amp_right_at_left * pair.u_left)) < 1e-9
    assert abs(pair.mass_right - pair.amp_right_at_left ** 2 * pair.mass_left) < 1e-9
    # anchoring: unit amplitude and prescribed phase at each end
    assert abs(pair.u_left[0] - math.sin(pair.beta_rep)) < 1e-12
    assert abs(pair.u_right[-1] - math.sin(pair.alpha)) < 1e-12
    assert pair.mass_right > 0.0 and pair.mass_left > 0.0


def test_pointwise_kernel_value_relations():
    # target a transition realized at the center of the coupling support
    cm = CellMap(SUITE, G0)
    beta = float(cm.backward(1.3, -5.8, want_integrals=False).a[-1])
    sol = solve_coupling(SUITE, G0, beta, 1.3)
    assert sol.exists
    assert abs(sol.value + 5.8) < 1e-10
    dens = float(SUITE.coupling(sol.value))
    assert dens > 0.0
    k1, kw = transition_kernel_values(SUITE, G0, beta, 1.3)
    kc = contraction_kernel_value(SUITE, G0, beta, 1.3)
    assert abs(k1 - dens / sol.mass) < 1e-12 * k1
    assert abs(kw - sol.amp_left ** 2 * k1) < 1e-12 * kw
    assert abs(kc * kc - k1 * kw) < 1e-12 * kc * kc
    # an unreachable transition gives exact zeros
    cm = CellMap(SUITE, G0)
    lo, hi = cm.sweep(1.3)
    beta_out = hi + 0.5 * (SPAN - (hi - lo))
    assert transition_kernel_values(SUITE, G0, beta_out, 1.3) == (0.0, 0.0)
    assert contraction_kernel_value(SUITE, G0, beta_out, 1.3) == 0.0


def test_bundle_matches_pointwise_values(small_bundle):
    b = small_bundle
    nz = np.argwhere(b.weighted.matrix > 0.0)
    rng = np.random.default_rng(9)
    for i, j in nz[rng.choice(nz.shape[0], size=5, replace=False)]:
        beta_i, alpha_j = b.weighted.nodes[i], b.weighted.nodes[j]
        k1, kw = transition_kernel_values(SUITE, G0, beta_i, alpha_j)
        kc = contraction_kernel_value(SUITE, G0, beta_i, alpha_j)
        assert abs(b.weighted.matrix[i, j] - kw) < 1e-9 * kw
        assert abs(b.transition_adjoint.matrix[j, i] - k1) < 1e-9 * k1
        assert abs(b.contraction.matrix[i, j] - kc) < 1e-9 * kc
    # entrywise square identity between the three kernels
    k1m = b.transition_adjoint.matrix.T
    assert np.max(np.abs(b.contraction.matrix ** 2 - k1m * b.weighted.matrix)) < 1e-12


def test_bundle_edge_functions(small_bundle):
    b = small_bundle
    cols, row = edge_functions(SUITE, G0, m=96)
    assert np.array_equal(cols, b.edge_columns)
    assert np.array_equal(row, b.edge_row)
    assert cols.shape == (96, 2 * NW)
    # boundary columns sample the weighted kernel at alpha = j pi
    for jj in (1, 3):
        alpha = jj * math.pi
        i = int(np.argmax(cols[:, jj]))
        kw = transition_kernel_values(SUITE, G0, b.weighted.nodes[i], alpha)[1]
        assert abs(cols[i, jj] - kw) < 1e-9 * kw
    # the edge row samples the transition kernel at beta = 0
    j = int(np.argmax(row))
    k1 = transition_kernel_values(SUITE, G0, 0.0, b.weighted.nodes[j])[0]
    assert abs(row[j] - k1) < 1e-9 * k1


def test_bundle_shift_invariance(small_bundle):
    # K(beta + pi, alpha + pi) = K(beta, alpha): basis of the blocking
    mat = small_bundle.contraction.matrix
    mseg = mat.shape[0] // (2 * NW)
    rolled = np.roll(np.roll(mat, -mseg, axis=0), -mseg, axis=1)
    assert np.max(np.abs(mat - rolled)) < 1e-9


def test_bundle_grid_alignment_validation():
    with pytest.raises(ValueError, match="divisible"):
        build_kernel_bundle(SUITE, G0, m=50)


def test_probability_normalization_at_fine_grid(big_bundle):
    # both stochastic kernels integrate to one in their left argument
    dev_w = abs(norm_1_to_1(big_bundle.weighted) - 1.0)
    dev_t = abs(norm_1_to_1(big_bundle.transition_adjoint) - 1.0)
    assert dev_w < 1e-3
    assert dev_t < 1e-3


def test_contraction_norm_below_one(big_bundle):
    gamma = norm_2_to_2(big_bundle.contraction, cross_check=True)
    assert 0.99 < gamma < 1.0


def test_norm_methods_agree():
    rng = np.random.default_rng(10)
    nodes = np.linspace(0.1, 2.0, 60)
    mat = rng.uniform(0.0, 1.0, (60, 60))
    from loclab.kernels import DiscreteKernel
    k = DiscreteKernel(nodes, np.full(60, 0.03), mat, "torus", 1.8, 1)
    sv = norm_2_to_2(k, method="svd")
    pw = norm_2_to_2(k, method="power")
    assert abs(sv - pw) < 1e-10 * max(1.0, sv)
    with pytest.raises(ValueError, match="method"):
        norm_2_to_2(k, method="qr")


def test_block_decomposition(big_bundle):
    k = big_bundle.contraction
    blocks = block_decompose(k)
    assert len(blocks) == 2 * NW
    norms = [norm_2_to_2(bl) for bl in blocks]
    full = norm_2_to_2(k)
    # the zero block is real, carries the full norm, and dominates
    assert np.max(np.abs(blocks[0].matrix.imag)) < 1e-12
    assert abs(norms[0] - full) < 1e-6
    assert max(norms) <= norms[0] + 1e-9
    # inverse transform reassembles the stored rows exactly
    mseg = k.matrix.shape[0] // (2 * NW)
    for n in range(2 * NW):
        rec = np.zeros((mseg, mseg), dtype=complex)
        for j, bl in enumerate(blocks):
            rec += bl.matrix * np.exp(-1j * math.pi * j * n / NW)
        rec /= 2 * NW
        assert np.max(np.abs(rec - k.matrix[:mseg, n * mseg:(n + 1) * mseg])) < 1e-10


def test_constant_kernel_block_structure():
    c = 0.37
    dk = discretize(lambda x, y: c, SPAN, 2 * NW * 10, n_winding=NW)
    assert abs(norm_1_to_1(dk) - c * SPAN) < 1e-12
    blocks = block_decompose(dk)
    assert abs(norm_2_to_2(blocks[0]) - c * SPAN) < 1e-9
    for bl in blocks[1:]:
        assert norm_2_to_2(bl) < 1e-12
    with pytest.raises(ValueError, match="torus"):
        block_decompose(blocks[0])


def test_kernel_bound_constants(big_bundle):
    c1, c2 = kernel_bound_constants(SUITE, big_bundle)
    assert math.isfinite(c1) and c1 > 0.0
    assert c2 > 0.0
    k1m = big_bundle.transition_adjoint.matrix.T
    on = k1m > 0.0
    # c1 bounds the amplitude factor, c2 the cell mass, entrywise
    assert np.all(big_bundle.weighted.matrix[on] <= (c1 + 1e-12) * k1m[on])
    dens = np.asarray(SUITE.coupling(big_bundle.couplings[on]), dtype=float)
    assert np.all(dens >= (c2 - 1e-12) * k1m[on])


def test_energy_absorption_and_norm_continuity():
    xs = np.linspace(-1.0, 0.0, 33)
    pert = piecewise.from_samples(xs, 0.05 * np.sin(math.pi * xs) ** 2)
    probe = norm_continuity_probe(SUITE, G0, pert, [0.1, 0.01], E=0.02, m=96)
    # replacing (g, E) by (g - E, 0) reproduces the kernel entrywise
    assert probe.absorption_kernel_maxdiff < 1e-9
    assert abs(probe.base_norm - probe.absorbed_norm) < 1e-12
    assert probe.norm_shifts[0] > probe.norm_shifts[1] >= 0.0


def test_large_coupling_amplitude_growth():
    mod = reference_model()
    g = mod.background.cell(0)
    amps = large_coupling_amplitude(mod, g, 0.7, [1e2, 1e3, 1e4])
    assert amps.shape == (3,)
    assert amps[0] > 0.0
    assert np.all(np.diff(amps) > 0.0)


def test_structured_matrix_layout():
    mat = structured_matrix([1.0, 2.0, 3.0], [9.0, 1.0, 1.0])
    expected = np.array([[1.0, 1.0, 1.0], [1.0, 2.0, 2.0], [1.0, 1.0, 3.0]])
    assert np.array_equal(mat, expected)
    with pytest.raises(ValueError, match="equal length"):
        structured_matrix([1.0, 2.0], [1.0])


def test_structured_determinant_closed_form():
    assert abs(structured_determinant([1.0, 2.0, 3.0], [9.0, 1.0, 1.0]) - 2.0) < 1e-14
    # b = 0 reduces to the product of the diagonal entries
    a = [1.5, 2.5, 0.5, 4.0]
    assert abs(structured_determinant(a, [0.0] * 4) - np.prod(a)) < 1e-12
    # a degenerate row pair kills the determinant
    assert structured_determinant([1.0, 2.0, 3.0], [0.0, 2.0, 3.0]) == 0.0
    rng = np.random.default_rng(11)
    for n in range(2, 9):
        a = rng.uniform(0.5, 2.0, n)
        b = rng.uniform(-1.0, 1.0, n)
        closed = structured_determinant(a, b, cross_check=True)
        dense = float(np.linalg.det(structured_matrix(a, b)))
        assert abs(dense - closed) < 1e-10 * max(1.0, abs(closed))


def test_jacobian_identity_small_boxes():
    mod = reference_model()
    for L, seed, k in [(1, 31, 1), (2, 32, 2)]:
        omega = sample_couplings(mod.coupling, 2 * L, seed)
        rep = jacobian_check(mod, omega, L, k)
        assert rep.index == k
        assert rep.analytic_det > 0.0
        assert rep.rel_error < 1e-4
        assert rep.fh_max_error < 1e-4
