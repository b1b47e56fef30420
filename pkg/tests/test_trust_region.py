import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from certopt.discretization import ParameterBox
from certopt.trust_region import (ExactModel, FomData, RbModel, TrParams, active_sets,
                                  armijo_backtrack, bfgs_inverse_update, compute_agc,
                                  evaluate_acceptance, parameter_control, post_iteration_update,
                                  projected_bfgs, projected_descent_solve, run_tr,
                                  skip_enrichment_flag)


class Quadratic:
    """0.5 (x-c)^T H (x-c) + offset with an optional constant relative estimate."""

    approximate_enrichment = False

    def __init__(self, H, c, est=0.0, offset=1.0):
        self.H, self.c, self.est = np.asarray(H, float), np.asarray(c, float), est
        self.offset = offset
        self.counters = Counter()

    def value(self, mu):
        d = np.asarray(mu) - self.c
        return 0.5 * d @ self.H @ d + self.offset

    def gradient(self, mu):
        return self.H @ (np.asarray(mu) - self.c)

    def hessian_vec(self, mu, eta):
        return self.H @ eta

    def estimate(self, mu):
        return self.est * self.value(mu)

    def fom_evaluate(self, mu, purpose="check"):
        return FomData(np.asarray(mu, float), self.value(mu), self.gradient(mu))

    def enrich(self, mu, fom_data=None, estimators=True):
        return fom_data or self.fom_evaluate(mu)

    def assemble_estimators(self):
        pass

    def has_estimators(self):
        return True

    def basis_sizes(self):
        return ()


BOX = ParameterBox(np.zeros(2), np.full(2, 4.0))
H = np.array([[3.0, 1.0], [1.0, 2.0]])


def test_params_validated():
    for bad in (dict(beta1=1.0), dict(eta_rho=0.5), dict(kappa=0.0), dict(sub_method="lbfgs")):
        with pytest.raises(ValueError):
            TrParams(**bad)


def test_armijo_full_step_on_unconstrained_quadratic():
    m = Quadratic(np.eye(2), [1.0, 1.0])
    mu = np.array([2.0, 3.0])
    res = armijo_backtrack(m, mu, m.value(mu), -m.gradient(mu), BOX, math.inf, TrParams())
    assert res.success and res.step == 0
    assert np.allclose(res.mu, [1.0, 1.0])


def test_armijo_backtracks_on_trust_region_violation():
    m = Quadratic(np.eye(2), [1.0, 1.0], est=0.3)
    mu = np.array([3.0, 3.0])
    # every candidate has q = 0.3 > delta
    res = armijo_backtrack(m, mu, m.value(mu), -m.gradient(mu), BOX, 0.2, TrParams(max_armijo=10))
    assert not res.success and np.array_equal(res.mu, mu)
    res = armijo_backtrack(m, mu, m.value(mu), -m.gradient(mu), BOX, 0.5, TrParams())
    assert res.success


def test_agc_is_first_projected_gradient_step():
    m = Quadratic(H, [1.0, 2.0])
    mu = np.array([3.5, 0.5])
    agc = compute_agc(m, mu, BOX, math.inf, TrParams())
    sub = projected_descent_solve(m, mu, BOX, math.inf, TrParams(), max_iter=1)
    assert np.allclose(agc.mu, sub.agc_mu) and agc.value == sub.agc_value


@pytest.mark.parametrize("method", ["bfgs", "newton_cg"])
def test_subproblem_solves_box_quadratic(method):
    # unconstrained minimizer at (-1, 5) lies outside the box; oracle is the KKT point below
    m = Quadratic(H, [-1.0, 5.0])
    sub = projected_descent_solve(m, [2.0, 2.0], BOX, math.inf, TrParams(tau_sub=1e-10), method)
    # with mu_1 = 0 active: minimize over mu_2, 2 (mu_2 - 5) + (0 + 1) = 0 -> mu_2 = 4.5 > 4, so mu_2 = 4
    assert sub.reason == "foc"
    assert np.allclose(sub.mu, [0.0, 4.0], atol=1e-8)
    g = m.gradient(sub.mu)
    assert g[0] > 0 and g[1] < 0


def test_interior_quadratic_bfgs_converges():
    m = Quadratic(H, [1.0, 2.0])
    sub = projected_descent_solve(m, [3.0, 3.0], BOX, math.inf, TrParams(tau_sub=1e-10))
    assert np.allclose(sub.mu, [1.0, 2.0], atol=1e-8)


def test_bfgs_reset_on_negative_curvature():
    B, reset = bfgs_inverse_update(np.array([1.0, 0.0]), np.zeros(2), np.array([-1.0, 0.0]), np.zeros(2), 5 * np.eye(2))
    assert reset and np.array_equal(B, np.eye(2))


@settings(max_examples=30, deadline=None)
@given(arrays(float, 2, elements=st.floats(-3, 3)), arrays(float, 2, elements=st.floats(-3, 3)))
def test_bfgs_secant_equation(s, y):
    if y @ s <= 1e-3:
        return
    B, reset = bfgs_inverse_update(s, np.zeros(2), y, np.zeros(2), np.eye(2))
    assert not reset
    assert np.allclose(B @ y, s, atol=1e-8 * max(1.0, np.abs(s).max()))
    assert np.allclose(B, B.T)


def test_active_sets():
    act, inact = active_sets(np.array([0.0, 2.0, 4.0 - 1e-10]), ParameterBox(np.zeros(3), np.full(3, 4.0)), 1e-8)
    assert np.array_equal(act, [1, 0, 1]) and np.array_equal(inact, [0, 1, 0])


def test_acceptance_rules():
    assert evaluate_acceptance(1.0, 0.1, 1.2) == "accept"
    assert evaluate_acceptance(1.0, 0.1, 0.8) == "reject"
    assert evaluate_acceptance(1.0, 0.3, 1.2) == "needs_fom"
    assert evaluate_acceptance(1.0, None, 5.0) == "needs_fom"
    # relaxation widens the acceptance
    assert evaluate_acceptance(1.0, 0.3, 1.2, eps_cond=0.2) == "accept"


def test_radius_sequence_on_rejections():
    p = TrParams()
    d = [p.delta0]
    for _ in range(2):
        d.append(post_iteration_update(d[-1], None, p, accepted=False))
    assert d == pytest.approx([0.1, 0.05, 0.025])
    assert post_iteration_update(0.1, 0.9, p, True) == pytest.approx(0.2)
    assert post_iteration_update(0.1, 0.5, p, True) == 0.1
    assert post_iteration_update(0.1, 0.9, TrParams(enlarging=False), True) == 0.1


def test_skip_flag_requires_all_three_conditions():
    p = TrParams()
    g = np.array([1.0, 1.0])
    assert skip_enrichment_flag(0.01, 0.1, 1.0, 1.0, g, g, p)
    assert not skip_enrichment_flag(0.06, 0.1, 1.0, 1.0, g, g, p)
    assert not skip_enrichment_flag(0.01, 0.1, 1.0, 1.1, g, g, p)
    assert not skip_enrichment_flag(0.01, 0.1, 1.0, 1.0, g, g * 1.1, p)


def test_relaxation_schedule():
    p = TrParams(relaxed=True, relaxation_offset=5)
    assert p.eps_tr(0) == 1e5 and p.eps_tr(7) == pytest.approx(1e-2)
    assert TrParams().eps_tr(0) == 0.0


def test_run_tr_with_exact_model_reaches_box_minimizer():
    m = Quadratic(H, [-1.0, 5.0])
    state = run_tr(m, BOX, [2.0, 2.0], TrParams(tau_foc=1e-8, tau_sub=1e-10))
    assert state.converged and state.reason == "foc"
    assert np.allclose(state.mu, [0.0, 4.0], atol=1e-7)
    assert state.history[0]["decision"] == "init"


def test_run_tr_on_fom_matches_projected_bfgs(b1_fom, b1_spec):
    mu0 = b1_spec.point(b1_spec.mu_0)
    ref = projected_bfgs(b1_fom, b1_fom.box, mu0, tau_foc=1e-8)
    model = RbModel(b1_fom, "ncd")
    state = run_tr(model, b1_fom.box, mu0, TrParams(tau_foc=1e-8))
    assert state.converged
    Jref = b1_fom.value(ref.mu)
    assert abs(state.fom_value - Jref) <= 1e-8 * abs(Jref)
    assert np.allclose(state.mu, b1_spec.point(b1_spec.mu_d), atol=1e-4)


def test_run_tr_deterministic(b1_fom, b1_spec):
    mu0 = b1_spec.point(b1_spec.mu_0)
    a = run_tr(RbModel(b1_fom, "ncd"), b1_fom.box, mu0, TrParams(tau_foc=1e-7))
    b = run_tr(RbModel(b1_fom, "ncd"), b1_fom.box, mu0, TrParams(tau_foc=1e-7))
    assert np.array_equal(a.mu, b.mu) and a.k == b.k


def test_parameter_control_aborts_without_positive_curvature():
    m = Quadratic(H, [1.0, 2.0])
    params = TrParams(tau_mu=1e-12, tau_foc=1e-2)
    state = run_tr(m, BOX, [3.0, 3.0], params)
    state, report = parameter_control(state, m, BOX, params, lambda mu: -1.0)
    assert report == ["second-order condition not verified"]
    assert state.reason.startswith("parameter_control_aborted")


def test_parameter_control_tightens_tolerance():
    # zero offset keeps relative decrease measurable near the minimizer
    m = Quadratic(H, [1.0, 2.0], offset=0.0)
    params = TrParams(tau_mu=1e-5, tau_foc=1e-2, tau_sub=1e-2)
    state = run_tr(m, BOX, [3.0, 3.0], params)
    lam = np.linalg.eigvalsh(H)[0]
    state, report = parameter_control(state, m, BOX, params, lambda mu: lam)
    assert len(report) > 1 and report[0] > 1e-5 >= report[-1]
    assert params.tau_foc < 1e-2
    assert np.linalg.norm(state.mu - [1.0, 2.0]) <= report[-1] + 1e-12


def test_exact_model_matches_fom(b1_fom):
    m = ExactModel(b1_fom)
    mu = b1_fom.box.center
    assert m.estimate(mu) == 0.0
    assert m.value(mu) == b1_fom.value(mu)
    assert np.array_equal(m.gradient(mu), b1_fom.value_and_gradient(mu).gradient)
