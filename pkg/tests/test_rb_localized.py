import math

import numpy as np
import pytest

from certopt.fom_opt import finite_difference_gradient
from certopt.lod_two_scale import build_lod_problem
from certopt.problems import benchmark_spec
from certopt.rb_localized import (LocalizedCertifiedModel, LocalizedReduction, Stage1Rom, Stage2Rom,
                                  build_two_scale_model, load_stage1, local_enrich, rblod_snapshot,
                                  save_stage1, stage1_build, stage1_greedy, stage1_solve,
                                  stage2_build, stage2_greedy)


@pytest.fixture(scope="module")
def setup(lod_opt):
    lod = lod_opt.lod
    cons = lod.constants()
    train = lod.box.sample(6, 1)
    roms, traces = stage1_build(lod, train, 1e-2, cons.alpha)
    red = LocalizedReduction(lod_opt, roms, cons)
    return lod_opt, cons, train, roms, traces, red


def corrector_energy_error(lod, rom, mu):
    """Exact energy error of the reduced correctors of every shape function."""
    patch = rom.patch
    exact = lod.corrector(patch, mu).correctors
    d = exact - rom.reconstruct(rom.solve(lod.operator.theta(mu)))
    A = lod.operator.evaluate(mu)[patch.interior][:, patch.interior]
    return np.sqrt(np.einsum("ij,ij->j", d, A @ d))


# Stage 1 ---------------------------------------------------------------------------

def test_stage1_greedy_reaches_tolerance(setup):
    _, _, _, roms, traces, _ = setup
    assert all(t.status in ("converged", "exact_space") for t in traces)
    assert all(t.steps[-1][3] <= 1e-2 for t in traces if t.status == "converged")
    assert all(r.size > 0 for r in roms)


def test_stage1_estimate_bounds_corrector_error(setup):
    opt, _, _, roms, _, _ = setup
    lod = opt.lod
    for mu in lod.box.sample(4, 31):
        theta = lod.operator.theta(mu)
        for rom in roms[::5]:
            err = corrector_energy_error(lod, rom, mu)
            assert np.all(err <= rom.estimate(theta) * (1 + 1e-8) + 1e-14)


def test_stage1_exact_at_selected_pairs(setup):
    opt, _, train, roms, traces, _ = setup
    lod = opt.lod
    for rom, tr in zip(roms[:4], traces[:4]):
        for _, i, j, _ in tr.steps[:-1]:
            eta = rom.estimate(lod.operator.theta(train[i]))[j]
            assert eta <= 1e-10 * max(1.0, tr.steps[0][3])


def test_stage1_rejects_bad_input(lod_opt):
    lod = lod_opt.lod
    with pytest.raises(ValueError):
        stage1_greedy(lod, lod.pair.patches[0], np.zeros((0, lod.num_parameters)), 1e-2, 1.0)
    with pytest.raises(ValueError):
        stage1_greedy(lod, lod.pair.patches[0], lod.box.sample(2, 0), 0.0, 1.0)


def test_stage1_solve_single_function(setup):
    opt, _, _, roms, _, _ = setup
    rom = roms[3]
    theta = opt.lod.operator.theta(opt.box.center)
    v = np.random.default_rng(0).standard_normal(opt.pair.coarse.num_dofs)
    C, block, eta = stage1_solve(rom, theta)
    c1, b1, e1 = stage1_solve(rom, theta, v)
    assert np.allclose(c1, C @ v[rom.shape_dofs])
    assert np.allclose(b1, block @ v[rom.shape_dofs])
    assert e1 <= np.abs(v[rom.shape_dofs]) @ eta * (1 + 1e-12)


def test_stage1_persistence(tmp_path, setup):
    opt, _, _, roms, _, _ = setup
    save_stage1(roms, tmp_path / "s1.npz")
    back = load_stage1(tmp_path / "s1.npz")
    theta = opt.lod.operator.theta(opt.box.sample(1, 5)[0])
    for a, b in zip(roms, back):
        assert np.array_equal(a.solve(theta), b.solve(theta))
        assert np.array_equal(a.estimate(theta), b.estimate(theta))


# RBLOD -----------------------------------------------------------------------------------

def test_rblod_equals_lod_with_exact_stage1_spaces(lod_opt):
    lod = lod_opt.lod
    cons = lod.constants()
    mu = lod.box.sample(1, 17)[0]
    corr = lod.correctors(mu)
    roms = []
    for p, c in zip(lod.pair.patches, corr):
        rom = Stage1Rom(lod, p, cons.alpha)
        rom.extend(c.correctors)
        roms.append(rom)
    red = LocalizedReduction(lod_opt, roms, cons)
    rs = red.solve(mu, dual=True)
    ref = lod_opt.solve(mu)
    assert np.abs(rs.u - ref.u).max() <= 1e-10 * np.abs(ref.u).max()
    assert red.estimates(rs)["primal"] <= 1e-8 * red.coarse_norm(ref.u)


def test_rblod_gradient_matches_finite_differences(setup):
    _, _, _, _, _, red = setup
    mu = red.lod.box.sample(1, 44)[0]
    g = red.gradient(red.solve(mu, dual=True))
    fd = finite_difference_gradient(lambda m: red.solve(m).value, mu, 1e-5)
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-6 * np.abs(g).max())


def test_rblod_estimates_reliable(setup):
    opt, cons, _, _, _, red = setup
    lod = opt.lod
    for mu in lod.box.sample(4, 91):
        sol = opt.solve(mu, dual=True)
        U = lod.two_scale_tuple(sol.u, sol.correctors)
        rs = red.solve(mu, dual=True)
        est = red.estimates(rs)
        err = lod.two_scale_norms(mu, U - red.two_scale_tuple(rs), cons.rho, sol.correctors)[0]
        assert err <= est["primal"]
        assert abs(sol.value - rs.value) <= est["functional"]


def test_rblod_zero_source():
    spec = benchmark_spec("B2", n_h=16, n_H=4, ell=1, source=0.0)
    opt = build_lod_problem(spec)
    cons = opt.lod.constants()
    roms, _ = stage1_build(opt.lod, opt.box.sample(2, 0), 1e-2, cons.alpha)
    assert np.all(LocalizedReduction(opt, roms, cons).solve(opt.box.center).u == 0)


# Stage 2 ------------------------------------------------------------------------------

def test_single_snapshot_stage2_sizes(setup):
    opt, _, train, _, _, red = setup
    sol = red.solve(train[0])
    rom = stage2_build(red, [rblod_snapshot(sol, red.roms)], red.rhs_components)
    assert rom.size == 1
    assert rom.residual_size <= opt.lod.num_components + red.rhs_components.shape[1]


def test_stage2_residual_at_snapshots_below_rblod(setup):
    # the snapshot tuple lies in the Stage-2 space, so least squares can only reduce its residual
    _, _, train, _, _, red = setup
    tsm = build_two_scale_model(red, train[:3])
    for mu in train[:3]:
        rs = red.solve(mu, dual=True)
        ts = tsm.solve(mu, dual=True)
        assert ts.eta <= red.estimates(rs)["primal"] * (1 + 1e-10)


def test_stage2_exact_when_stage1_exact(lod_opt):
    lod = lod_opt.lod
    cons = lod.constants()
    mu = lod.box.sample(1, 6)[0]
    roms = [Stage1Rom(lod, p, cons.alpha) for p in lod.pair.patches]
    red = LocalizedReduction(lod_opt, roms, cons)
    local_enrich(red, mu, 0.0)
    ts = build_two_scale_model(red, [mu]).solve(mu, dual=True)
    ref = lod_opt.solve(mu, dual=True)
    assert np.abs(ts.u - ref.u).max() <= 1e-9 * np.abs(ref.u).max()
    assert np.abs(ts.p - ref.p).max() <= 1e-8 * np.abs(ref.p).max()


def test_stage2_rebuild_follows_stage1_change(lod_opt):
    lod = lod_opt.lod
    cons = lod.constants()
    train = lod.box.sample(2, 2)
    roms, _ = stage1_build(lod, train[:1], 1e-1, cons.alpha)
    red = LocalizedReduction(lod_opt, roms, cons)
    a = build_two_scale_model(red, train[1:]).primal.A_hat.copy()
    local_enrich(red, train[1], 0.0)
    b = build_two_scale_model(red, train[1:]).primal.A_hat
    assert a.shape != b.shape or np.abs(a - b).max() > 1e-8


def test_stage2_deterministic(setup):
    _, _, train, _, _, red = setup
    a = build_two_scale_model(red, train[:2])
    b = build_two_scale_model(red, train[:2])
    assert np.array_equal(a.primal.A_hat, b.primal.A_hat)
    assert np.array_equal(a.dual.F_hat, b.dual.F_hat)


def test_stage2_online_cost_independent_of_coarse_grid():
    ops = []
    for n_H in (4, 8):
        spec = benchmark_spec("B2", n_h=32, n_H=n_H, ell=1)
        opt = build_lod_problem(spec)
        cons = opt.lod.constants()
        train = opt.box.sample(2, 3)
        roms, _ = stage1_build(opt.lod, train, 1e-1, cons.alpha)
        red = LocalizedReduction(opt, roms, cons)
        tsm = build_two_scale_model(red, train)
        tsm.solve(opt.box.center)
        ops.append((tsm.primal.size, tsm.primal.residual_size, tsm.primal.operations))
    assert ops[0] == ops[1]


def test_stage2_greedy_and_persistence(tmp_path, setup):
    _, _, train, _, _, red = setup
    g = stage2_greedy(red, train, 1e-8, max_size=4)
    assert g.status in ("converged", "max_size", "duplicate")
    assert len(set(g.selected)) == len(g.selected)
    assert all(b <= a * (1 + 1e-8) for a, b in zip(g.max_estimates, g.max_estimates[1:])) or len(g.max_estimates) < 2
    g.rom.save(tmp_path / "s2.npz")
    back = Stage2Rom.load(tmp_path / "s2.npz")
    theta = red.lod.operator.theta(train[0])
    w = red.lod.rhs.theta(train[0])
    assert np.array_equal(g.rom.solve(theta, w)[1], back.solve(theta, w)[1])


def test_tsrblod_gradient_matches_finite_differences(setup):
    _, _, train, _, _, red = setup
    tsm = build_two_scale_model(red, train[:3])
    mu = red.lod.box.sample(1, 8)[0]
    g = tsm.gradient(tsm.solve(mu))
    fd = finite_difference_gradient(lambda m: tsm.solve(m).value, mu, 1e-5)
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-6 * np.abs(g).max())


# local enrichment ----------------------------------------------------------------

@pytest.fixture
def fresh_reduction():
    spec = benchmark_spec("B2", n_h=32, n_H=4, ell=1)
    opt = build_lod_problem(spec)
    cons = opt.lod.constants()
    roms = [Stage1Rom(opt.lod, p, cons.alpha) for p in opt.pair.patches]
    return opt, LocalizedReduction(opt, roms, cons)


def test_local_enrich_infinite_tolerance_skips_all(fresh_reduction):
    opt, red = fresh_reduction
    rep = local_enrich(red, opt.box.center, math.inf)
    assert rep.enriched == [] and len(rep.skipped) == len(red.roms)
    assert all(r.size == 0 for r in red.roms)


def test_local_enrich_zero_tolerance_enriches_all(fresh_reduction):
    opt, red = fresh_reduction
    rep = local_enrich(red, opt.box.center, 0.0)
    assert len(rep.enriched) == len(red.roms)
    assert np.all(rep.eta_after <= 1e-8 * rep.eta_before.max())


def test_local_enrich_skips_elements_away_from_changed_block(fresh_reduction):
    opt, red = fresh_reduction
    mu = opt.box.center
    local_enrich(red, mu, 0.0)
    mu2 = mu.copy()
    mu2[0] = opt.box.upper[0]          # first field, lower-left block only
    rep = local_enrich(red, mu2, 1e-6)
    assert 0 < len(rep.skipped) < len(red.roms)
    assert 0 in rep.enriched


def test_certified_model_reproduces_lod_at_enrichment(lod_opt):
    model = LocalizedCertifiedModel(lod_opt, "tsrblod", tau_loc=1e-6)
    mu = lod_opt.box.sample(1, 23)[0]
    data = model.enrich(mu)
    assert model.value(mu) == pytest.approx(data.value, rel=1e-8)
    assert model.estimate(mu) <= 1e-6 * abs(data.value)
    with pytest.raises(ValueError):
        LocalizedCertifiedModel(lod_opt, "lod")
