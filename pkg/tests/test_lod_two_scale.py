import math

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from certopt.discretization import Q1Assembler
from certopt.fom_opt import finite_difference_gradient
from certopt.lod_two_scale import (CoarsePair, PgLod, build_lod_problem, default_oversampling,
                                   fem_reference_error)
from certopt.problems import benchmark_spec, diffusion_form, source_form


def make_lod(n_h, n_H, ell, **spec_kw):
    spec = benchmark_spec("B2", n_h=n_h, n_H=n_H, ell=ell, resolution=n_h, **spec_kw)
    pair = CoarsePair(n_h, n_H, ell)
    operator, fields = diffusion_form(spec, pair.fine)
    return spec, PgLod(pair, operator, fields, source_form(spec, pair.fine), spec.box)


def global_corrector_stiffness(lod, mu):
    """K_ij = a((1-Q)phi_j, phi_i) with Q the ideal corrector from one global saddle solve."""
    pair = lod.pair
    A = lod.operator.evaluate(mu).toarray()
    C = pair.interpolation.toarray()
    P = pair.prolongation.toarray()
    n, m = A.shape[0], C.shape[0]
    S = np.block([[A, C.T], [C, np.zeros((m, m))]])
    Q = np.linalg.solve(S, np.vstack([A @ P, np.zeros((m, P.shape[1]))]))[:n]
    return P.T @ A @ (P - Q), Q


def test_patch_geometry_and_overlap_constant():
    pair = CoarsePair(16, 4, 1)
    assert pair.c_ovl == 9
    assert pair.patches[0].size_in_elements == (2, 2)
    assert pair.patches[5].size_in_elements == (3, 3)
    assert all(p.size_in_elements == (4, 4) for p in CoarsePair(16, 4, 4).patches)


def test_default_oversampling():
    assert default_oversampling(8) == 3
    assert default_oversampling(16) == 3
    assert default_oversampling(2) == 1


def test_divisibility_required():
    with pytest.raises(ValueError):
        CoarsePair(30, 4)


def test_interpolation_is_left_inverse_of_prolongation():
    pair = CoarsePair(16, 4, 1)
    assert abs(pair.interpolation @ pair.prolongation - sp.eye(pair.coarse.num_dofs)).max() < 1e-12


def test_identical_grids_give_coarse_fem():
    _, lod = make_lod(8, 8, 1)
    mu = lod.box.center
    sol = lod.solve(mu)
    assert all(np.abs(c.correctors).max(initial=0.0) < 1e-12 for c in sol.correctors)
    assert abs(sol.stiffness - lod.operator.evaluate(mu)).max() < 1e-12


def test_whole_domain_patches_reproduce_ideal_method():
    _, lod = make_lod(16, 4, 4)
    mu = lod.box.sample(1, 0)[0]
    K_ref, _ = global_corrector_stiffness(lod, mu)
    K = lod.solve(mu).stiffness.toarray()
    assert np.abs(K - K_ref).max() <= 1e-9 * np.abs(K_ref).max()
    # the ideal Petrov-Galerkin matrix is symmetric
    assert np.abs(K - K.T).max() <= 1e-9 * np.abs(K).max()


def test_localization_error_decays_with_oversampling():
    errs = []
    for ell in (1, 2, 3):
        _, lod = make_lod(32, 8, ell)
        mu = lod.box.center
        if ell == 1:
            K_ref, _ = global_corrector_stiffness(lod, mu)
        errs.append(np.abs(lod.solve(mu).stiffness.toarray() - K_ref).max())
    assert errs[0] > errs[1] > errs[2]


def test_column_structure_follows_patches():
    _, lod = make_lod(16, 4, 1)
    sol = lod.solve(lod.box.center)
    for p, c in zip(lod.pair.patches, sol.correctors):
        assert c.correctors.shape == (p.num_interior, p.num_shapes)
        assert c.block.shape == (p.coarse_nodes.size, p.num_shapes)


def test_zero_source_gives_zero_solution():
    _, lod = make_lod(16, 4, 1, source=0.0)
    assert np.all(lod.solve(lod.box.center).u == 0)


def test_threaded_assembly_is_bit_identical():
    spec, lod = make_lod(16, 4, 1)
    pair = lod.pair
    lod2 = PgLod(pair, lod.operator, lod.fields, lod.rhs, lod.box, threads=3)
    mu = lod.box.sample(1, 2)[0]
    a, b = lod.solve(mu), lod2.solve(mu)
    assert (a.stiffness != b.stiffness).nnz == 0
    assert np.array_equal(a.u, b.u)


def test_lod_close_to_fem_for_smooth_coefficient():
    _, lod = make_lod(32, 8, 2, field_ranges=[[1.0, 1.0], [1.0, 1.0]])
    assert fem_reference_error(lod, lod.box.center) < 0.05


def test_gradient_matches_finite_differences(lod_opt):
    mu = lod_opt.box.sample(1, 3)[0]
    g = lod_opt.gradient(mu)
    fd = finite_difference_gradient(lod_opt.value, mu, 1e-5)
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-6 * np.abs(g).max())


def test_gradient_vanishes_at_target(lod_opt, lod_spec):
    mu_d = lod_spec.point(lod_spec.mu_d)
    sol = lod_opt.value_and_gradient(mu_d)
    assert sol.value == pytest.approx(1.0, abs=1e-12)
    assert np.abs(sol.gradient).max() < 1e-9


# two-scale formulation --------------------------------------------------------------

def block_oracle(lod, mu, rho):
    """Assemble the two-scale saddle system directly and solve it."""
    pair = lod.pair
    A = lod.operator.evaluate(mu)
    P = pair.prolongation
    th = lod.operator.theta(mu)
    nH = P.shape[1]
    offs = [nH]
    for p in pair.patches:
        offs.append(offs[-1] + p.num_interior)
    n = offs[-1]
    ncons = sum(p.coarse_nodes.size for p in pair.patches)
    B = sp.lil_matrix((n + ncons, n + ncons))
    rhs = np.zeros(n + ncons)
    rhs[:nH] = P.T @ lod.rhs.evaluate(mu)
    B[:nH, :nH] = (P.T @ A @ P).toarray()
    s = math.sqrt(rho)
    row = n
    for t, p in enumerate(pair.patches):
        E = sp.csr_matrix((np.ones(p.num_interior), (p.interior, np.arange(p.num_interior))),
                          shape=(P.shape[0], p.num_interior))
        sl = slice(offs[t], offs[t + 1])
        elems = pair.local_elements[t]
        A_T = Q1Assembler(pair.fine, elements=elems).matrix(
            np.tensordot(th, lod.element_stack[:, elems].reshape(len(th), -1, 16), axes=1))
        B[:nH, sl] = -(P.T @ A @ E).toarray()
        B[sl, sl] = s * (E.T @ A @ E).toarray()
        B[sl, :nH] = -s * (E.T @ A_T @ P).toarray()
        C = p.constraint.toarray()
        k = C.shape[0]
        B[row:row + k, sl] = C
        B[sl, row:row + k] = C.T
        row += k
    x = spla.spsolve(B.tocsc(), rhs)
    return x[:nH], [x[offs[t]:offs[t + 1]] for t in range(len(pair.patches))]


@pytest.fixture(scope="module")
def two_scale_setup(lod_opt):
    lod = lod_opt.lod
    return lod, lod.constants()


def test_two_scale_solution_matches_block_oracle(two_scale_setup):
    lod, cons = two_scale_setup
    mu = lod.box.sample(1, 7)[0]
    sol = lod.solve(mu)
    U = lod.two_scale_tuple(sol.u, sol.correctors)
    xc, xf = block_oracle(lod, mu, cons.rho)
    assert np.abs(xc - U.coarse).max() <= 1e-9 * np.abs(xc).max()
    assert max(np.abs(a - b).max() for a, b in zip(xf, U.fine)) <= 1e-9 * np.abs(xc).max()
    res = lod.two_scale_dual_norm(*lod.two_scale_residual(mu, U, cons.rho))
    assert res <= 1e-10 * lod.plain_norm(U) * cons.beta


def test_two_scale_estimators_reliable(two_scale_setup):
    lod, cons = two_scale_setup
    for seed in range(3):
        mu = lod.box.sample(1, seed)[0]
        sol = lod.solve(mu)
        U = lod.two_scale_tuple(sol.u, sol.correctors)
        Up = U + 1e-2 * lod.random_two_scale(10 + seed)
        eta_a, eta_1 = lod.two_scale_estimators(mu, Up, cons)
        err_a, err_1 = lod.two_scale_norms(mu, U - Up, cons.rho, sol.correctors)
        assert err_a <= eta_a
        assert err_1 <= eta_1
        # efficiency through continuity of the two-scale form
        assert eta_a <= math.sqrt(5) / cons.gamma_kl * math.sqrt(cons.beta) * err_a * (1 + 1e-10)


def test_two_scale_continuity_and_norm_equivalence(two_scale_setup):
    lod, cons = two_scale_setup
    ci = lod.pair.exact_interpolation_constant()
    mu = lod.box.sample(1, 4)[0]
    corr = lod.correctors(mu)
    for seed in range(3):
        V, W = lod.random_two_scale(seed), lod.random_two_scale(100 + seed)
        nA, n1 = lod.two_scale_norms(mu, V, cons.rho, corr)
        b = lod.two_scale_apply(mu, V, W, cons.rho)
        assert abs(b) <= math.sqrt(cons.beta) * nA * lod.plain_norm(W) * (1 + 1e-12)
        assert math.sqrt(cons.alpha) / ci * n1 <= nA * (1 + 1e-12)
        assert nA <= math.sqrt(3 * (1 + cons.c_ovl) * cons.beta) * n1


def test_two_scale_form_is_linear(two_scale_setup):
    lod, cons = two_scale_setup
    mu = lod.box.center
    U, V, W = (lod.random_two_scale(s) for s in (1, 2, 3))
    lhs = lod.two_scale_apply(mu, 2.0 * U + V, W, cons.rho)
    rhs = 2.0 * lod.two_scale_apply(mu, U, W, cons.rho) + lod.two_scale_apply(mu, V, W, cons.rho)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_random_tuples_lie_in_kernel(two_scale_setup):
    lod, _ = two_scale_setup
    V = lod.random_two_scale(5)
    for p, vT in zip(lod.pair.patches, V.fine):
        assert np.abs(p.constraint @ vT).max(initial=0.0) < 1e-10


def test_constants_need_positive_coefficient(two_scale_setup):
    lod, cons = two_scale_setup
    assert 0 < cons.alpha <= cons.beta
    assert cons.rho == pytest.approx(cons.c_ovl * cons.beta / cons.alpha)


def test_build_problem_counts_local_solves(lod_spec):
    opt = build_lod_problem(lod_spec)
    opt.value(opt.box.center)
    assert opt.counters["lod_local"] == opt.pair.num_coarse_elements
    assert opt.counters["lod_coarse"] == 1
