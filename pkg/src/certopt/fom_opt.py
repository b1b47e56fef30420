"""Full-order optimality system: primal/dual solves, objective, gradient, Hessian action."""
from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import AffineForm, AffineTheta, ParameterBox, project_to_box


class SingularSystemError(RuntimeError):
    pass


def factorize(matrix, symmetric: bool = False):
    """Sparse LU; ``symmetric`` selects an A+A^T ordering with diagonal pivoting."""
    try:
        if symmetric:
            return spla.splu(sp.csc_matrix(matrix), permc_spec="MMD_AT_PLUS_A",
                             diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
        return spla.splu(sp.csc_matrix(matrix))
    except RuntimeError as exc:
        raise SingularSystemError(str(exc)) from exc


def form_scalars(form: AffineForm, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Per-component values: component . x (linear) or y^T component x (bilinear)."""
    if form.arity == "linear":
        return np.array([c @ x for c in form.components])
    y = x if y is None else y
    return np.array([y @ (c @ x) for c in form.components])


@dataclass
class TikhonovTerm:
    """Theta(mu) = offset + 0.5 * sum_i weights_i (mu_i - target_i)^2."""

    weights: np.ndarray
    target: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        self.target = np.atleast_1d(np.asarray(self.target, dtype=float))
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=float), self.target.shape).copy()

    def value(self, mu) -> float:
        d = np.asarray(mu, dtype=float) - self.target
        return float(self.offset + 0.5 * np.sum(self.weights * d * d))

    def gradient(self, mu) -> np.ndarray:
        return self.weights * (np.asarray(mu, dtype=float) - self.target)

    def hessian(self, mu) -> np.ndarray:
        return np.diag(self.weights)


@dataclass
class QuadraticObjective:
    """J(u, mu) = Theta(mu) + j_mu(u) + k_mu(u, u) with symmetric k."""

    theta: TikhonovTerm
    linear: AffineForm
    quadratic: AffineForm

    def value(self, mu, u) -> float:
        return float(self.theta.value(mu) + self.linear.evaluate(mu) @ u
                     + u @ (self.quadratic.evaluate(mu) @ u))

    def state_derivative(self, mu, u) -> np.ndarray:
        """dJ/du as a dual vector: j_mu + 2 K_mu u."""
        return self.linear.evaluate(mu) + 2.0 * (self.quadratic.evaluate(mu) @ u)

    def parameter_gradient(self, mu, u) -> np.ndarray:
        """Partial derivative in mu at fixed state."""
        return (self.theta.gradient(mu)
                + self.linear.theta.coefficients.T @ form_scalars(self.linear, u)
                + self.quadratic.theta.coefficients.T @ form_scalars(self.quadratic, u))


def tracking_objective(mass: sp.spmatrix, target: np.ndarray, sigma_d: float, sigma_i, mu_target,
                       offset: float = 1.0, interpolation: sp.spmatrix | None = None) -> QuadraticObjective:
    """sigma_d/2 ||E u - target||_M^2 + Tikhonov + offset, E the optional interpolation."""
    mu_target = np.atleast_1d(np.asarray(mu_target, dtype=float))
    P = mu_target.size
    E = interpolation
    Mt = mass @ target
    if E is None:
        K = 0.5 * sigma_d * sp.csr_matrix(mass)
        jvec = -sigma_d * Mt
    else:
        K = 0.5 * sigma_d * sp.csr_matrix(E.T @ mass @ E)
        jvec = -sigma_d * (E.T @ Mt)
    const = offset + 0.5 * sigma_d * float(target @ Mt)
    theta = TikhonovTerm(sigma_i, mu_target, const)
    return QuadraticObjective(theta,
                              AffineForm([np.asarray(jvec)], AffineTheta.constant(P), "linear"),
                              AffineForm([K], AffineTheta.constant(P), "bilinear"))


@dataclass
class FomSolution:
    mu: np.ndarray
    u: np.ndarray
    p: np.ndarray | None = None
    lu: object = None
    value: float | None = None
    gradient: np.ndarray | None = None


@dataclass
class FomSystem:
    """Assembled fine-grid optimality system with affine operator, rhs and objective."""

    operator: AffineForm
    rhs: AffineForm
    objective: QuadraticObjective
    box: ParameterBox
    mu_check: np.ndarray
    counters: Counter = field(default_factory=Counter)
    counter_key: str = "fem"

    def __post_init__(self):
        self.mu_check = np.asarray(self.mu_check, dtype=float)
        self.energy_product = sp.csr_matrix(self.operator.evaluate(self.mu_check))

    @property
    def num_parameters(self) -> int:
        return self.operator.num_parameters

    @property
    def num_dofs(self) -> int:
        return self.energy_product.shape[0]

    def _check(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.num_parameters,):
            raise ValueError(f"parameter must have length {self.num_parameters}")
        if not self.box.contains(mu, 1e-12):
            warnings.warn("parameter outside the admissible box", RuntimeWarning, stacklevel=3)
        return mu

    def solve_primal(self, mu, lu=None) -> np.ndarray:
        return self.solve(mu, dual=False, lu=lu).u

    def solve_dual(self, mu, u, lu=None) -> np.ndarray:
        mu = self._check(mu)
        lu = lu or factorize(self.operator.evaluate(mu))
        self.counters[self.counter_key] += 1
        return lu.solve(self.objective.state_derivative(mu, u))

    def solve(self, mu, dual: bool = True, lu=None) -> FomSolution:
        mu = self._check(mu)
        lu = lu or factorize(self.operator.evaluate(mu))
        u = lu.solve(self.rhs.evaluate(mu))
        self.counters[self.counter_key] += 1
        p = None
        if dual:
            p = lu.solve(self.objective.state_derivative(mu, u))
            self.counters[self.counter_key] += 1
        return FomSolution(mu, u, p, lu)

    def objective_value(self, mu, u) -> float:
        return self.objective.value(mu, u)

    def primal_residual(self, mu, u) -> np.ndarray:
        return self.rhs.evaluate(mu) - self.operator.evaluate(mu) @ u

    def gradient(self, mu, u, p) -> np.ndarray:
        """Adjoint gradient: partial_mu J(u, mu) + partial_mu r(u)[p]."""
        mu = np.asarray(mu, dtype=float)
        return (self.objective.parameter_gradient(mu, u)
                + self.rhs.theta.coefficients.T @ form_scalars(self.rhs, p)
                - self.operator.theta.coefficients.T @ form_scalars(self.operator, u, p))

    def value_and_gradient(self, mu) -> FomSolution:
        sol = self.solve(mu)
        sol.value = self.objective_value(sol.mu, sol.u)
        sol.gradient = self.gradient(sol.mu, sol.u, sol.p)
        return sol

    def value(self, mu) -> float:
        sol = self.solve(mu, dual=False)
        return self.objective_value(sol.mu, sol.u)

    def solve_sensitivity(self, sol: FomSolution, eta, which: str = "primal", primal_sensitivity=None):
        """Directional derivative of the primal or dual solution in direction eta."""
        mu, eta = sol.mu, np.asarray(eta, dtype=float)
        lu = sol.lu or factorize(self.operator.evaluate(mu))
        dA = self.operator.directional(eta)
        du = primal_sensitivity
        if du is None:
            du = lu.solve(self.rhs.directional(eta) - dA @ sol.u)
            self.counters[self.counter_key] += 1
        if which == "primal":
            return du
        if which != "dual":
            raise ValueError("which must be 'primal' or 'dual'")
        obj = self.objective
        rhs = (obj.linear.directional(eta) + 2.0 * (obj.quadratic.directional(eta) @ sol.u)
               + 2.0 * (obj.quadratic.evaluate(mu) @ du) - dA @ sol.p)
        self.counters[self.counter_key] += 1
        return lu.solve(rhs)

    def sensitivity_gradient(self, sol: FomSolution) -> np.ndarray:
        """Gradient via primal sensitivities d_i u (independent route to the adjoint formula)."""
        mu = sol.mu
        obj = self.objective
        dJdu = obj.state_derivative(mu, sol.u)
        g = obj.parameter_gradient(mu, sol.u)
        for i in range(self.num_parameters):
            e = np.zeros(self.num_parameters)
            e[i] = 1.0
            g[i] += dJdu @ self.solve_sensitivity(sol, e, "primal")
        return g

    def hessian_vec(self, mu, eta, sol: FomSolution | None = None) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        sol = sol if sol is not None and sol.p is not None else self.solve(mu)
        du = self.solve_sensitivity(sol, eta, "primal")
        dp = self.solve_sensitivity(sol, eta, "dual", primal_sensitivity=du)
        obj = self.objective
        u, p = sol.u, sol.p
        return (obj.theta.hessian(mu) @ np.asarray(eta, dtype=float)
                + obj.linear.theta.coefficients.T @ form_scalars(obj.linear, du)
                + 2.0 * obj.quadratic.theta.coefficients.T @ form_scalars(obj.quadratic, du, u)
                + self.rhs.theta.coefficients.T @ form_scalars(self.rhs, dp)
                - self.operator.theta.coefficients.T @ (form_scalars(self.operator, du, p)
                                                        + form_scalars(self.operator, u, dp)))

    def hessian_matrix(self, mu) -> np.ndarray:
        sol = self.solve(mu)
        P = self.num_parameters
        H = np.column_stack([self.hessian_vec(mu, np.eye(P)[i], sol) for i in range(P)])
        return 0.5 * (H + H.T)


def foc_measure(mu, gradient, box: ParameterBox) -> float:
    mu = np.asarray(mu, dtype=float)
    return float(np.linalg.norm(mu - project_to_box(mu - gradient, box)))


def finite_difference_gradient(fun: Callable, mu, step: float = 1e-6) -> np.ndarray:
    """Central differences with step scaled by max(1, |mu_i|)."""
    mu = np.asarray(mu, dtype=float)
    g = np.zeros_like(mu)
    for i in range(mu.size):
        h = step * max(1.0, abs(mu[i]))
        e = np.zeros_like(mu)
        e[i] = h
        g[i] = (fun(mu + e) - fun(mu - e)) / (2 * h)
    return g
