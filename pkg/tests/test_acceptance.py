"""Acceptance suite. Each test records one pass/fail line, listed in the pytest terminal summary."""
import math
import time

import numpy as np
import pytest
import scipy.linalg as sla

from certopt.discretization import (AffineForm, AffineTheta, ParameterBox, PiecewiseConstantField,
                                    assemble_component, build_grid, build_thermal_block,
                                    project_to_box, random_block_values, stability_constants)
from certopt.fom_opt import finite_difference_gradient, tracking_objective
from certopt.lod_two_scale import (CoarsePair, LodOptimization, PgLod, build_lod_problem,
                                   fem_reference_error)
from certopt.problems import ProblemSpec, benchmark_spec, build_fem_problem, diffusion_form, source_form
from certopt.rb_global import weak_greedy
from certopt.rb_localized import (LocalizedCertifiedModel, LocalizedReduction, build_two_scale_model,
                                  stage1_build, stage2_greedy)
from certopt.trust_region import (ExactModel, RbModel, TrParams, armijo_backtrack, bfgs_inverse_update,
                                  projected_bfgs, run_tr)
from test_lod_two_scale import block_oracle

pytestmark = pytest.mark.acceptance


def energy(fom, v):
    return math.sqrt(float(v @ (fom.energy_product @ v)))


@pytest.fixture(scope="module")
def b2_global():
    spec = benchmark_spec("B2")
    fom = build_fem_problem(spec)
    greedy = weak_greedy(fom, spec.box.sample(20, 3), max_size=5, quantity="functional")
    return spec, fom, greedy


@pytest.fixture(scope="module")
def b1():
    spec = benchmark_spec("B1")
    fom = build_fem_problem(spec)
    mu0 = spec.point(spec.mu_0)
    ref = projected_bfgs(fom, spec.box, mu0, 1e-6)
    return spec, fom, mu0, ref


def test_criterion_1_gradients(b2_global, report):
    t0 = time.perf_counter()
    spec, fom, greedy = b2_global
    rom = greedy.rom
    worst_fom = worst_rom = 0.0
    for mu in spec.box.sample(5, 42):
        g = fom.value_and_gradient(mu).gradient
        fd = finite_difference_gradient(fom.value, mu, 1e-5)
        worst_fom = max(worst_fom, np.linalg.norm(g - fd) / np.linalg.norm(fd))
        g = rom.gradient(rom.solve(mu))
        fd = finite_difference_gradient(rom.value, mu, 1e-5)
        worst_rom = max(worst_rom, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    ok = fom.num_dofs == 63 * 63 and fom.num_parameters == 8 and max(worst_fom, worst_rom) <= 1e-5
    report(1, ok, f"rel FD error fom={worst_fom:.2e} ncd={worst_rom:.2e}", t0)
    assert ok


def test_criterion_2_estimator_reliability(b2_global, report):
    t0 = time.perf_counter()
    spec, fom, greedy = b2_global
    rom = greedy.rom
    std = greedy.reductor.build_rom("standard")
    effectivity, violations = {}, []

    def check(name, err, est):
        effectivity.setdefault(name, []).append(est / err if err > 0 else math.inf)
        if err > est:
            violations.append(name)

    for mu in spec.box.sample(20, 77):
        f = fom.value_and_gradient(mu)
        s = rom.solve(mu)
        check("primal", energy(fom, rom.reconstruct(s.u) - f.u), rom.primal_estimate(s))
        check("dual", energy(fom, rom.reconstruct(s.p, "dual") - f.p), rom.dual_estimate(s))
        check("J_ncd", abs(f.value - rom.functional(s)), rom.functional_estimate(s, "ncd"))
        check("J_std", abs(f.value - rom.standard_functional(s)), rom.functional_estimate(s, "standard"))
        for kind in ("ncd_adjoint", "ncd_sensitivity"):
            check("grad_" + kind, np.linalg.norm(f.gradient - rom.gradient(s, kind)),
                  np.linalg.norm(rom.gradient_estimate(s, kind)))
        check("grad_std", np.linalg.norm(f.gradient - std.gradient(std.solve(mu))),
              np.linalg.norm(rom.gradient_estimate(s, "inexact")))

    # localized estimators on a reduced LOD problem
    lspec = benchmark_spec("B2", n_h=32, n_H=4)
    opt = build_lod_problem(lspec)
    lod = opt.lod
    cons = lod.constants()
    train = lspec.box.sample(10, 1)
    roms, _ = stage1_build(lod, train, 1e-2, cons.alpha)
    red = LocalizedReduction(opt, roms, cons)
    tsm = build_two_scale_model(red, train[:4])
    for mu in lspec.box.sample(20, 77):
        sol = opt.solve(mu, dual=True)
        U = lod.two_scale_tuple(sol.u, sol.correctors)
        Pd = lod.two_scale_tuple(sol.p, sol.correctors)

        def err(V):
            return lod.two_scale_norms(mu, V, cons.rho, sol.correctors)[0]

        rs = red.solve(mu, dual=True)
        e = red.estimates(rs)
        check("eta_a_rb", err(U - red.two_scale_tuple(rs)), e["primal"])
        check("dual_rb", err(Pd - red.two_scale_tuple(rs, rs.p)), e["dual"])
        check("J_rb", abs(sol.value - rs.value), e["functional"])
        ts = tsm.solve(mu, dual=True)
        e = tsm.estimates(ts)
        check("eta_a", err(U - tsm.primal.two_scale_tuple(ts.c, roms)), e["primal"])
        check("dual_ts", err(Pd - tsm.dual.two_scale_tuple(ts.c_dual, roms)), e["dual"])
        check("J_ts", abs(sol.value - ts.value), e["functional"])

    ok = not violations
    eff = " ".join(f"{k}=[{min(v):.3g},{max(v):.3g}]" for k, v in effectivity.items())
    report(2, ok, f"violations={len(violations)} effectivities {eff}", t0)
    assert ok, violations


def test_criterion_3_ncd_superiority(b2_global, report):
    t0 = time.perf_counter()
    spec, fom, greedy = b2_global
    rom = greedy.rom
    better, identity = 0, 0.0
    val = spec.box.sample(20, 77)
    for mu in val:
        f = fom.solve(mu, dual=False)
        J_h = fom.objective_value(mu, f.u)
        s = rom.solve(mu)
        better += abs(J_h - rom.functional(s)) <= abs(J_h - rom.standard_functional(s))
        # residual at the reduced dual, evaluated with full-order vectors
        r = fom.primal_residual(mu, rom.reconstruct(s.u)) @ rom.reconstruct(s.p, "dual")
        identity = max(identity, abs(rom.functional(s) - rom.standard_functional(s) - r) / abs(J_h))
    ok = len(greedy.selected) >= 4 and better >= 0.9 * len(val) and identity <= 1e-12
    report(3, ok, f"enrichments={len(greedy.selected)} ncd_better={better}/{len(val)} "
                  f"identity_rel={identity:.1e}", t0)
    assert ok


def test_criterion_4_tr_rb_reproduction(b1, report):
    t0 = time.perf_counter()
    spec, fom, mu0, ref = b1
    model = RbModel(fom, "ncd")
    state = run_tr(model, spec.box, mu0, TrParams(tau_foc=1e-6))
    dist = float(np.linalg.norm(state.mu - ref.mu))
    size = max(model.basis_sizes())
    ok = state.converged and state.k <= 10 and size <= 10 and dist <= 1e-4
    report(4, ok, f"outer={state.k} basis={model.basis_sizes()} foc={state.foc:.2e} dist_to_bfgs={dist:.2e}", t0)
    assert ok


def test_criterion_5_relaxed_tr(b1, report):
    t0 = time.perf_counter()
    spec, fom, mu0, _ = b1
    runs = {}
    for relaxed in (False, True):
        fom.counters.clear()
        state = run_tr(RbModel(fom, "ncd"), spec.box, mu0,
                       TrParams(tau_foc=1e-6, relaxed=relaxed, relaxation_offset=5))
        runs[relaxed] = (state, fom.counters["estimator_assembly"])
    dist = float(np.linalg.norm(runs[True][0].mu - runs[False][0].mu))
    ok = runs[True][0].converged and dist <= 1e-4 and runs[True][1] < runs[False][1]
    report(5, ok, f"dist={dist:.2e} estimator_assemblies relaxed={runs[True][1]} "
                  f"certified={runs[False][1]}", t0)
    assert ok


def test_criterion_6_two_scale_oracle(report):
    t0 = time.perf_counter()
    spec = benchmark_spec("B2", n_h=32, n_H=4, ell=2)
    lod = build_lod_problem(spec).lod
    cons = lod.constants()
    mu = spec.point("random:7")
    sol = lod.solve(mu)
    U = lod.two_scale_tuple(sol.u, sol.correctors)
    residual = lod.two_scale_dual_norm(*lod.two_scale_residual(mu, U, cons.rho))
    xc, xf = block_oracle(lod, mu, cons.rho)
    diff = max(np.abs(xc - U.coarse).max(), max(np.abs(a - b).max() for a, b in zip(xf, U.fine)))
    ok = residual <= 1e-9 and diff <= 1e-9
    report(6, ok, f"residual_dual_norm={residual:.1e} oracle_diff={diff:.1e}", t0)
    assert ok


def test_criterion_7_lod_convergence(report):
    t0 = time.perf_counter()
    errs = []
    for n_H in (8, 16, 32):
        spec = ProblemSpec(n_h=256, n_H=n_H, ell=2, blocks=(1, 1), fields=1, resolution=256, seed=5,
                           field_ranges=[[0.5, 1.5]], lower=[1.0], upper=[1.0])
        pair = CoarsePair(256, n_H, 2)
        op, fields = diffusion_form(spec, pair.fine)
        lod = PgLod(pair, op, fields, source_form(spec, pair.fine), spec.box)
        errs.append(fem_reference_error(lod, np.array([1.0])))
    factors = [errs[i] / errs[i + 1] for i in range(2)]
    ok = min(factors) >= 1.8
    report(7, ok, "errors=" + "/".join(f"{e:.2e}" for e in errs)
           + " factors=" + "/".join(f"{f:.2f}" for f in factors), t0)
    assert ok


def test_criterion_8_stage_certification(report):
    t0 = time.perf_counter()
    n_h, n_H = 128, 8
    pair = CoarsePair(n_h, n_H, 2)
    f0 = PiecewiseConstantField(random_block_values(5, 0, n_h * n_h, "uniform", 1.0, 2.0).reshape(n_h, n_h))
    f1 = PiecewiseConstantField(random_block_values(5, 1, n_h * n_h, "uniform", 0.2, 1.0).reshape(n_h, n_h))
    comps = [assemble_component(pair.fine, f, "diffusion") for f in (f0, f1)]
    op = AffineForm(comps, AffineTheta([1.0, 0.0], [[0.0], [1.0]]), "bilinear")
    rhs = AffineForm([assemble_component(pair.fine, PiecewiseConstantField.constant(1.0), "rhs")],
                     AffineTheta.constant(1), "linear")
    box = ParameterBox(np.array([0.1]), np.array([5.0]))
    lod = PgLod(pair, op, [f0, f1], rhs, box)
    target = lod.solve(box.center).u
    opt = LodOptimization(lod, tracking_objective(pair.coarse_mass, target, 1.0, 0.0, box.center), box)
    cons = lod.constants()
    train = np.linspace(0.1, 5.0, 25)[:, None]
    roms, _ = stage1_build(lod, train, 1e-3, cons.alpha)
    red = LocalizedReduction(opt, roms, cons)
    greedy = stage2_greedy(red, train, 1e-2)
    val = np.linspace(0.1, 4.9, 10)[:, None] + 0.013
    eta = max(greedy.rom.solve(lod.operator.theta(m), lod.rhs.theta(m))[2] for m in val)
    past_floor = stage2_greedy(red, train, 0.0)
    ok = (greedy.status == "converged" and greedy.rom.size <= 15 and eta <= 1e-2
          and past_floor.status == "duplicate")
    report(8, ok, f"N={greedy.rom.size} max_val_eta={eta:.2e} past_floor={past_floor.status} "
                  f"after N={past_floor.rom.size}", t0)
    assert ok


def test_criterion_9_tr_lrb(report):
    t0 = time.perf_counter()
    spec = benchmark_spec("B2", n_h=128, n_H=8, ell=2)
    opt = build_lod_problem(spec)
    mu0 = spec.point(spec.mu_0)
    ref = projected_bfgs(opt, spec.box, mu0, 1e-6)
    J_ref = opt.value(ref.mu)
    rel, skips, conv = {}, {}, {}
    for variant in ("tsrblod", "rblod"):
        model = LocalizedCertifiedModel(opt, variant, 1e-3)
        state = run_tr(model, spec.box, mu0, TrParams(tau_foc=1e-6))
        rel[variant] = abs(opt.value(state.mu) - J_ref) / J_ref
        skips[variant] = list(model.skip_counts)
        conv[variant] = state.converged
    ok = all(conv.values()) and max(rel.values()) <= 1e-6 and any(max(s, default=0) > 0 for s in skips.values())
    report(9, ok, f"rel_J={ {k: f'{v:.1e}' for k, v in rel.items()} } skips={skips}", t0)
    assert ok


def test_criterion_10_invariants(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    failures = []

    # projection step lemma
    box = ParameterBox(np.zeros(3), np.full(3, 2.0))
    for _ in range(500):
        mu = project_to_box(rng.uniform(-1, 3, 3), box)
        d, t = rng.uniform(-3, 3, 3), rng.uniform(0, 1)
        if (np.linalg.norm(mu - project_to_box(mu - t * d, box))
                < t * np.linalg.norm(mu - project_to_box(mu - d, box)) - 1e-10):
            failures.append("projection")

    # min-theta against the generalized eigenvalue oracle
    form, _ = build_thermal_block(build_grid(8), (2, 2), 1, 8, seed=2, ranges=[(0.2, 1.0)])
    pbox = ParameterBox(np.full(4, 0.5), np.full(4, 3.0))
    product = form.evaluate(pbox.center).toarray()
    for mu in pbox.sample(50, 9):
        alpha_lb, gamma_ub = stability_constants(form, pbox.center, mu)
        lam = sla.eigh(form.evaluate(mu).toarray(), product, eigvals_only=True)
        if alpha_lb > lam.min() * (1 + 1e-12) or gamma_ub < lam.max() * (1 - 1e-12):
            failures.append("min_theta")

    # norm-equivalence sandwich and two-scale continuity
    lod = build_lod_problem(benchmark_spec("B2", n_h=32, n_H=4)).lod
    cons = lod.constants()
    c_i = lod.pair.exact_interpolation_constant()
    for seed in range(10):
        mu = lod.box.sample(1, seed)[0]
        corr = lod.correctors(mu)
        V, W = lod.random_two_scale(seed), lod.random_two_scale(100 + seed)
        n_a, n_1 = lod.two_scale_norms(mu, V, cons.rho, corr)
        if not (math.sqrt(cons.alpha) / c_i * n_1 <= n_a * (1 + 1e-12)
                and n_a <= math.sqrt(3 * (1 + cons.c_ovl) * cons.beta) * n_1):
            failures.append("norm_equivalence")
        if abs(lod.two_scale_apply(mu, V, W, cons.rho)) > math.sqrt(cons.beta) * n_a * lod.plain_norm(W) * (1 + 1e-12):
            failures.append("continuity")

    # BFGS curvature reset
    for _ in range(50):
        s = rng.standard_normal(2)
        y = -s * rng.uniform(0.1, 2)
        B, reset = bfgs_inverse_update(s, np.zeros(2), y, np.zeros(2), 3 * np.eye(2))
        if not reset or not np.array_equal(B, np.eye(2)):
            failures.append("bfgs_reset")

    # Armijo path with kappa_arm = 1e-4: accepted step decreases enough, the one before does not
    spec = benchmark_spec("B1", n_h=16)
    model = ExactModel(build_fem_problem(spec))
    params = TrParams()
    for mu in spec.box.sample(10, 4):
        value = model.value(mu)
        direction = -model.gradient(mu) * 10.0
        res = armijo_backtrack(model, mu, value, direction, spec.box, math.inf, params)

        def sufficient(j):
            t = 0.5 ** j
            cand = project_to_box(mu + t * direction, spec.box)
            return model.value(cand) <= value - 1e-4 / t * float(np.sum((cand - mu) ** 2))

        if params.kappa_arm != 1e-4 or not res.success or not sufficient(res.step):
            failures.append("armijo")
        elif res.step > 0 and sufficient(res.step - 1):
            failures.append("armijo_first")

    ok = not failures
    report(10, ok, f"violations={len(failures)} {sorted(set(failures))}", t0)
    assert ok, failures
