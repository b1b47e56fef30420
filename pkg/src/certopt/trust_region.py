"""Error-aware trust-region driver over certified surrogate models."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .discretization import ParameterBox, project_to_box

MACHINE_RADIUS = 2.22e-16


class CertifiedModel(Protocol):
    """Surrogate interface consumed by :func:`run_tr`.

    ``estimate`` returns None when no estimator data is assembled.
    """

    counters: Counter
    approximate_enrichment: bool

    def value(self, mu) -> float: ...
    def gradient(self, mu) -> np.ndarray: ...
    def estimate(self, mu) -> float | None: ...
    def fom_evaluate(self, mu, purpose: str = ...): ...
    def enrich(self, mu, fom_data=None, estimators: bool = True): ...
    def assemble_estimators(self) -> None: ...
    def has_estimators(self) -> bool: ...
    def basis_sizes(self) -> tuple: ...


@dataclass
class FomData:
    """FOM value and gradient at a parameter, plus an opaque payload for enrichment."""

    mu: np.ndarray
    value: float
    gradient: np.ndarray
    payload: object = None


def decreasing_sequence(offset: float = 10.0, floor: float = 0.0) -> Callable[[int], float]:
    """k -> 10**(offset - k), the relaxation schedule."""
    return lambda k: max(10.0 ** (offset - k), floor)


@dataclass
class TrParams:
    delta0: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.95
    beta3: float = 0.5
    eta_rho: float = 0.75
    kappa: float = 0.5
    kappa_arm: float = 1e-4
    tau_sub: float = 1e-8
    tau_foc: float = 1e-6
    tau_g: float = 1e-3
    tau_grad: float = 1e-2
    tau_mu: float | None = None
    max_outer: int = 40
    max_sub: int = 400
    max_armijo: int = 50
    active_eps: float = 1e-8
    sub_method: str = "bfgs"
    optional_enrichment: bool = False
    relaxed: bool = False
    relaxation_offset: float = 10.0
    estimator_skip_threshold: float = 1e4
    fco: bool = False
    enlarging: bool = True
    safety_tolerance: float = 1e-16

    def __post_init__(self):
        for name in ("beta1", "beta2", "beta3", "kappa"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not 0.75 <= self.eta_rho < 1.0:
            raise ValueError("eta_rho must lie in [3/4, 1)")
        if self.sub_method not in ("bfgs", "newton_cg"):
            raise ValueError("sub_method must be 'bfgs' or 'newton_cg'")

    def eps_tr(self, k: int) -> float:
        return 10.0 ** (self.relaxation_offset - k) if self.relaxed else 0.0

    def eps_cond(self, k: int) -> float:
        return self.eps_tr(k)


@dataclass
class TrustRegionState:
    k: int = 0
    mu: np.ndarray | None = None
    delta: float = 0.1
    history: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    fom_value: float | None = None
    fom_gradient: np.ndarray | None = None
    foc: float = math.inf
    inner_iterations: int = 0
    counters: Counter = field(default_factory=Counter)


def active_sets(mu, box: ParameterBox, eps: float):
    act = ((mu - box.lower) <= eps) | ((box.upper - mu) <= eps)
    return act.astype(float), (~act).astype(float)


def bfgs_inverse_update(new_mu, old_mu, new_grad, old_grad, B):
    """Inverse BFGS update; resets to identity when the curvature product is non-positive."""
    y = new_grad - old_grad
    s = new_mu - old_mu
    den = y @ s
    if den <= 0.0:
        return np.eye(B.shape[0]), True
    By = B @ y
    return (B + (den + y @ By) / den ** 2 * np.outer(s, s)
            - (np.outer(By, s) + np.outer(s, By)) / den), False


@dataclass
class ArmijoResult:
    step: int
    mu: np.ndarray
    value: float
    ratio: float
    success: bool


def _ratio(model, mu, value) -> float:
    est = model.estimate(mu)
    if est is None:
        return 0.0
    return abs(est / value) if value != 0 else math.inf


def armijo_backtrack(model, mu, value, direction, box: ParameterBox, delta_eff: float,
                     params: TrParams) -> ArmijoResult:
    """Projected backtracking with the Armijo decrease and the trust-region constraint."""
    for j in range(params.max_armijo):
        t = params.kappa ** j
        cand = project_to_box(mu + t * direction, box)
        val = model.value(cand)
        q = _ratio(model, cand, val) if math.isfinite(delta_eff) else 0.0
        if (val <= value - params.kappa_arm / t * float(np.sum((cand - mu) ** 2))
                and q <= delta_eff):
            return ArmijoResult(j, cand, val, q, True)
    return ArmijoResult(params.max_armijo, np.array(mu, dtype=float), value, math.inf, False)


def compute_agc(model, mu, box: ParameterBox, delta: float, params: TrParams) -> ArmijoResult:
    value = model.value(mu)
    return armijo_backtrack(model, mu, value, -model.gradient(mu), box, delta, params)


@dataclass
class SubproblemResult:
    mu: np.ndarray
    value: float
    agc_mu: np.ndarray
    agc_value: float
    reason: str
    iterations: int
    resets: int = 0
    foc: float = math.inf


def _truncated_cg(apply, b, tol=1e-10, maxiter=None):
    x = np.zeros_like(b)
    r = b.copy()
    d = r.copy()
    rr = r @ r
    maxiter = maxiter or 10 * b.size
    for _ in range(maxiter):
        if math.sqrt(rr) <= tol * max(1.0, np.linalg.norm(b)):
            break
        Ad = apply(d)
        curv = d @ Ad
        if curv <= 0.0:
            if not x.any():
                x = d
            break
        a = rr / curv
        x = x + a * d
        r = r - a * Ad
        rr_new = r @ r
        d = r + rr_new / rr * d
        rr = rr_new
    return x


def projected_descent_solve(model, mu_start, box: ParameterBox, delta_eff: float,
                            params: TrParams, method: str | None = None,
                            tau_sub: float | None = None, max_iter: int | None = None) -> SubproblemResult:
    """Projected BFGS or Newton-CG on the model inside the (relaxed) trust region."""
    method = method or params.sub_method
    tau_sub = params.tau_sub if tau_sub is None else tau_sub
    max_iter = params.max_sub if max_iter is None else max_iter
    mu = project_to_box(mu_start, box)
    J = model.value(mu)
    g = model.gradient(mu)
    foc = float(np.linalg.norm(mu - project_to_box(mu - g, box)))
    B = np.eye(mu.size)
    agc_mu, agc_val = None, None
    resets = 0
    q = 0.0
    reason = "max_iter"
    mu_diff = J_diff = math.inf
    i = 0
    while i < max_iter:
        if i > 0:
            if math.isfinite(delta_eff) and q >= params.beta2 * delta_eff:
                reason = "boundary"
                break
            if foc < tau_sub:
                reason = "foc"
                break
            if mu_diff < params.safety_tolerance or J_diff < params.safety_tolerance:
                reason = "stall"
                break
        if i == 0:
            d = -g
        else:
            eps = params.active_eps if method == "bfgs" else min(params.active_eps, foc)
            act, inact = active_sets(mu, box, eps)
            if inact.sum() == 0.0:
                d = -g
            elif method == "bfgs":
                d = -(act * g + inact * (B @ (inact * g)))
            else:
                def apply(v):
                    return act * v + inact * model.hessian_vec(mu, inact * v)
                d = _truncated_cg(apply, -g)
            if d @ g >= -1e-14:
                d = -g
        arm = armijo_backtrack(model, mu, J, d, box, delta_eff, params)
        if not arm.success:
            if i == 0:
                agc_mu, agc_val = mu.copy(), J
            reason = "stall"
            break
        if i == 0:
            agc_mu, agc_val = arm.mu.copy(), arm.value
        new_g = model.gradient(arm.mu)
        mu_diff = np.linalg.norm(arm.mu - mu) / max(np.linalg.norm(mu), 1e-300)
        J_diff = abs(J - arm.value) / max(abs(J), 1e-300)
        if method == "bfgs":
            B, reset = bfgs_inverse_update(arm.mu, mu, new_g, g, B)
            resets += int(reset)
        mu, J, g, q = arm.mu, arm.value, new_g, arm.ratio
        foc = float(np.linalg.norm(mu - project_to_box(mu - g, box)))
        i += 1
    if agc_mu is None:
        agc_mu, agc_val = mu.copy(), J
    return SubproblemResult(mu, J, agc_mu, agc_val, reason, i, resets, foc)


def evaluate_acceptance(value_new: float, estimate: float | None, agc_value: float,
                        eps_cond: float = 0.0) -> str:
    """'accept', 'reject' or 'needs_fom' from the cheap error-aware conditions."""
    if estimate is None:
        return "needs_fom"
    if value_new + estimate < agc_value + eps_cond:
        return "accept"
    if value_new - estimate > agc_value + eps_cond:
        return "reject"
    return "needs_fom"


def post_iteration_update(delta: float, rho: float | None, params: TrParams, accepted: bool) -> float:
    if not accepted:
        return params.beta1 * delta
    if params.enlarging and rho is not None and rho >= params.eta_rho:
        return delta / params.beta1
    return delta


def skip_enrichment_flag(q_new: float, delta_next: float, g_h: float, g_r: float,
                         grad_h, grad_r, params: TrParams) -> bool:
    c1 = q_new <= params.beta3 * delta_next
    c2 = g_r > 0 and abs(g_h - g_r) / g_r <= params.tau_g
    ng = np.linalg.norm(grad_h)
    c3 = ng > 0 and np.linalg.norm(np.asarray(grad_h) - grad_r) / ng <= min(params.tau_grad,
                                                                            params.beta3 * delta_next)
    return bool(c1 and c2 and c3)


def _foc(mu, grad, box):
    return float(np.linalg.norm(mu - project_to_box(mu - grad, box)))


def run_tr(model, box: ParameterBox, mu0, params: TrParams | None = None,
           state: TrustRegionState | None = None, logger: Callable | None = None) -> TrustRegionState:
    """Trust-region reduced-basis loop; resumes from ``state`` when given."""
    params = params or TrParams()
    if state is None:
        state = TrustRegionState(mu=project_to_box(mu0, box), delta=params.delta0)
        need_est = not (params.relaxed and params.eps_tr(0) >= params.estimator_skip_threshold)
        data = model.enrich(state.mu, None, estimators=need_est)
        state.fom_value, state.fom_gradient = data.value, data.gradient
        state.foc = _foc(state.mu, data.gradient, box)
        _record(state, model, logger, decision="init", J_r=model.value(state.mu), q=0.0)
        if state.foc <= params.tau_foc:
            state.converged, state.reason = True, "foc"
            return state
    while state.k < params.max_outer:
        k = state.k
        eps_tr, eps_cond = params.eps_tr(k), params.eps_cond(k)
        use_est = not (params.relaxed and eps_tr >= params.estimator_skip_threshold)
        if use_est and not model.has_estimators():
            model.assemble_estimators()
        delta_eff = state.delta + eps_tr if use_est else math.inf
        sub = projected_descent_solve(model, state.mu, box, delta_eff, params)
        state.inner_iterations += sub.iterations
        J_old_at_mu = model.value(state.mu)
        est = model.estimate(sub.mu) if use_est else None
        q_new = abs(est / sub.value) if est is not None and sub.value != 0 else 0.0
        decision = evaluate_acceptance(sub.value, est, sub.agc_value, eps_cond)
        fom_data = None
        if decision == "needs_fom":
            fom_data = model.fom_evaluate(sub.mu, "acceptance_check")
            decision = "accept" if fom_data.value <= sub.agc_value + eps_cond else "reject"
            decision_tag = decision + "_fom"
        else:
            decision_tag = decision
        if decision == "reject":
            if params.fco and fom_data is not None:
                model.enrich(sub.mu, fom_data, estimators=use_est)
            state.delta = post_iteration_update(state.delta, None, params, False)
            state.counters["rejections"] += 1
            _record(state, model, logger, decision=decision_tag, J_r=sub.value, q=q_new,
                    mu_candidate=sub.mu, sub_reason=sub.reason)
            if state.delta < MACHINE_RADIUS:
                state.reason = "radius_below_machine_precision"
                return state
            continue
        if fom_data is None:
            purpose = "foc_check" if params.optional_enrichment else "enrichment"
            fom_data = model.fom_evaluate(sub.mu, purpose)
        rho_den = J_old_at_mu - sub.value
        rho = (state.fom_value - fom_data.value) / rho_den if rho_den != 0 else None
        new_delta = post_iteration_update(state.delta, rho, params, True)
        grad_r_old = model.gradient(sub.mu)
        skip = False
        if params.optional_enrichment and est is not None:
            skip = skip_enrichment_flag(q_new, new_delta, _foc(sub.mu, fom_data.gradient, box),
                                        _foc(sub.mu, grad_r_old, box), fom_data.gradient,
                                        grad_r_old, params)
        next_use_est = not (params.relaxed and params.eps_tr(k + 1) >= params.estimator_skip_threshold)
        if skip:
            state.counters["skipped_enrichments"] += 1
        else:
            model.enrich(sub.mu, fom_data, estimators=next_use_est)
        state.mu = np.array(sub.mu, dtype=float)
        state.delta = new_delta
        state.fom_value, state.fom_gradient = fom_data.value, fom_data.gradient
        state.foc = _foc(state.mu, fom_data.gradient, box)
        state.k += 1
        _record(state, model, logger, decision=decision_tag, J_r=sub.value, q=q_new, rho=rho,
                sub_reason=sub.reason, skipped=skip)
        if state.foc <= params.tau_foc:
            state.converged, state.reason = True, "foc"
            return state
    state.reason = "max_outer"
    return state


def _record(state, model, logger, **info):
    entry = {"k": state.k, "mu": np.array(state.mu, dtype=float), "delta": state.delta,
             "J_h": state.fom_value, "g_h": state.foc, "basis_sizes": model.basis_sizes(),
             "counters": dict(model.counters)}
    entry.update(info)
    state.history.append(entry)
    if logger is not None:
        logger(entry)


def parameter_control(state: TrustRegionState, model, box: ParameterBox, params: TrParams,
                      lambda_min_fun: Callable, max_rounds: int = 3):
    """Tighten tau_FOC by two orders while the parameter estimate exceeds tau_mu."""
    from .rb_global import parameter_estimate
    if params.tau_mu is None:
        return state, []
    report = []
    for _ in range(max_rounds):
        lam = lambda_min_fun(state.mu)
        est = parameter_estimate(state.mu, state.fom_gradient, box, lam)
        report.append(est)
        if isinstance(est, str):
            state.reason = "parameter_control_aborted: " + est
            return state, report
        if est <= params.tau_mu:
            return state, report
        params.tau_foc *= 1e-2
        # the inner solve must not stop before the outer criterion can be met
        params.tau_sub = min(params.tau_sub, params.tau_foc)
        state.converged = False
        state = run_tr(model, box, state.mu, params, state=state)
    return state, report


class ExactModel:
    """A FOM-like object (value_and_gradient) viewed as a model with zero estimator."""

    approximate_enrichment = False

    def __init__(self, fom, hessian: bool = False):
        self.fom = fom
        self.counters = fom.counters
        self._cache_key = None
        self._cache = None
        self._value_key = None
        self._value = None

    def _eval(self, mu):
        key = np.asarray(mu, dtype=float).tobytes()
        if key != self._cache_key:
            self._cache = self.fom.value_and_gradient(np.asarray(mu, dtype=float))
            self._cache_key = key
        return self._cache

    def value(self, mu):
        key = np.asarray(mu, dtype=float).tobytes()
        if key == self._cache_key:
            return self._cache.value
        if key != self._value_key:
            self._value = self.fom.value(np.asarray(mu, dtype=float))
            self._value_key = key
        return self._value

    def gradient(self, mu):
        return self._eval(mu).gradient

    def hessian_vec(self, mu, eta):
        return self.fom.hessian_vec(mu, eta)

    def estimate(self, mu):
        return 0.0

    def fom_evaluate(self, mu, purpose: str = "check"):
        s = self._eval(mu)
        return FomData(np.asarray(mu, dtype=float), s.value, s.gradient, s)

    def enrich(self, mu, fom_data=None, estimators=True):
        return fom_data or self.fom_evaluate(mu)

    def assemble_estimators(self):
        pass

    def has_estimators(self):
        return True

    def basis_sizes(self):
        return ()


def projected_bfgs(fom, box: ParameterBox, mu0, tau_foc: float = 1e-6, max_iter: int = 1000,
                   params: TrParams | None = None) -> SubproblemResult:
    """Reference projected BFGS on an exact objective (no trust region)."""
    params = params or TrParams()
    return projected_descent_solve(ExactModel(fom), mu0, box, math.inf, params, "bfgs",
                                   tau_sub=tau_foc, max_iter=max_iter)


class RbModel:
    """Global RB surrogate of a FomSystem for the trust-region driver."""

    approximate_enrichment = False

    def __init__(self, fom, variant: str = "ncd", strategy: str = "lagrange", stable: bool = True,
                 gradient_mode: str | None = None):
        from .rb_global import GlobalReductor
        self.fom = fom
        self.variant = variant
        self.strategy = strategy
        self.gradient_mode = gradient_mode
        self.reductor = GlobalReductor(fom, stable=stable)
        self.counters = fom.counters
        self.reductor.counters = self.counters
        self.rom = None
        self._cache = {}
        self._last_direction = None

    def _solve(self, mu):
        key = np.asarray(mu, dtype=float).tobytes()
        sol = self._cache.get(key)
        if sol is None:
            sol = self.rom.solve(np.asarray(mu, dtype=float))
            self.counters["rb"] += 1
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[key] = sol
        return sol

    def value(self, mu) -> float:
        return self.rom.functional(self._solve(mu))

    def gradient(self, mu) -> np.ndarray:
        return self.rom.gradient(self._solve(mu), self.gradient_mode)

    def hessian_vec(self, mu, eta) -> np.ndarray:
        return self.rom.hessian_vec(self._solve(mu), eta)

    def estimate(self, mu):
        if not self.rom.has_estimators:
            return None
        kind = "ncd" if self.variant == "ncd" else ("pg" if self.variant == "pg" else "standard")
        return self.rom.functional_estimate(self._solve(mu), kind)

    def fom_evaluate(self, mu, purpose: str = "check") -> FomData:
        sol = self.fom.value_and_gradient(np.asarray(mu, dtype=float))
        self.counters["fom_evaluations"] += 1
        self.counters["fom_" + purpose] += 1
        return FomData(sol.mu, sol.value, sol.gradient, sol)

    def enrich(self, mu, fom_data=None, estimators=True) -> FomData:
        if fom_data is None:
            fom_data = self.fom_evaluate(mu, "enrichment")
        self.reductor.enrich(fom_data.mu, self.strategy, eta=-fom_data.gradient,
                             solution=fom_data.payload)
        self.rom = self.reductor.build_rom(self.variant, estimators=estimators)
        self._cache = {}
        return fom_data

    def assemble_estimators(self) -> None:
        self.rom = self.reductor.build_rom(self.variant, estimators=True)
        self._cache = {}

    def has_estimators(self) -> bool:
        return self.rom is not None and self.rom.has_estimators

    def basis_sizes(self) -> tuple:
        return self.reductor.spaces.sizes
