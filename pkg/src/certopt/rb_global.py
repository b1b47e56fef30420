"""Global reduced-basis models of the optimality system with a posteriori estimators.

Variants: ``standard`` (Galerkin on separate primal/dual spaces), ``ncd`` (standard
plus the primal residual correction and its exact gradient/Hessian) and ``pg``
(Petrov-Galerkin with interchanged trial/test spaces).
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .discretization import AffineForm, AffineTheta, ProjectedForm, theta_ratios
from .fom_opt import FomSolution, FomSystem, TikhonovTerm, factorize

VARIANTS = ("standard", "ncd", "pg")
GRADIENT_MODES = ("inexact", "ncd_adjoint", "ncd_sensitivity", "pg")


class RomSingularError(RuntimeError):
    """Raised when a reduced system is (numerically) singular."""


def gram_schmidt(basis: np.ndarray, vectors, product, tol: float = 1e-10):
    """Append product-orthonormalized vectors to ``basis``; returns (basis, discarded)."""
    cols = [basis[:, i] for i in range(basis.shape[1])]
    B = basis
    discarded = 0
    for v in _as_columns(vectors):
        v = np.array(v, dtype=float)
        n0 = np.sqrt(max(v @ (product @ v), 0.0))
        if n0 == 0.0:
            discarded += 1
            continue
        for _ in range(2):
            if B.shape[1]:
                v = v - B @ (B.T @ (product @ v))
        nv = np.sqrt(max(v @ (product @ v), 0.0))
        if nv < tol * n0:
            discarded += 1
            continue
        cols.append(v / nv)
        B = np.column_stack(cols)
    if not cols:
        B = basis
    return B, discarded


def _as_columns(vectors):
    if isinstance(vectors, np.ndarray) and vectors.ndim == 1:
        return [vectors]
    if isinstance(vectors, np.ndarray):
        return [vectors[:, i] for i in range(vectors.shape[1])]
    return list(vectors)


@dataclass
class RbSpaces:
    """Energy-orthonormal primal and dual reduced bases (fine-dof coefficient columns)."""

    primal: np.ndarray
    dual: np.ndarray
    discarded: int = 0

    @staticmethod
    def empty(num_dofs: int) -> "RbSpaces":
        return RbSpaces(np.zeros((num_dofs, 0)), np.zeros((num_dofs, 0)))

    def extend(self, role: str, vectors, product, tol: float = 1e-10) -> int:
        old = getattr(self, role)
        new, disc = gram_schmidt(old, vectors, product, tol)
        setattr(self, role, new)
        self.discarded += disc
        return new.shape[1] - old.shape[1]

    @property
    def sizes(self) -> tuple[int, int]:
        return self.primal.shape[1], self.dual.shape[1]


class ResidualData:
    """Offline residual data for dual norms of linear combinations of generator functionals.

    ``stable=True`` stores coefficients in an orthonormal basis of Riesz representatives;
    otherwise the Gram matrix of the representatives is stored.
    """

    def __init__(self, generators: np.ndarray, product, product_lu, stable: bool = True,
                 tol: float = 1e-13):
        self.stable = stable
        riesz = product_lu.solve(np.asarray(generators, dtype=float))
        if riesz.ndim == 1:
            riesz = riesz[:, None]
        if stable:
            W, _ = gram_schmidt(np.zeros((riesz.shape[0], 0)), riesz, product, tol)
            self.matrix = W.T @ generators
        else:
            G = generators.T @ riesz
            self.matrix = 0.5 * (G + G.T)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def norm(self, coefficients: np.ndarray) -> float:
        if self.stable:
            return float(np.linalg.norm(self.matrix @ coefficients))
        return float(np.sqrt(max(coefficients @ (self.matrix @ coefficients), 0.0)))


@dataclass
class RomSolution:
    mu: np.ndarray
    u: np.ndarray
    p: np.ndarray
    z: np.ndarray | None = None
    w: np.ndarray | None = None
    cache: dict = field(default_factory=dict)


def _solve_dense(M, b):
    if M.shape[0] == 0:
        return np.zeros(0)
    if M.shape[0] != M.shape[1]:
        raise RomSingularError(f"reduced system is not square: {M.shape}")
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e14:
        raise RomSingularError(f"reduced system is singular (condition {cond:.3e})")
    return np.linalg.solve(M, b)


def _scalars(stack: np.ndarray, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    if stack.ndim == 2:
        return stack @ x
    return np.einsum("i,kij,j->k", x if y is None else y, stack, x)


class GlobalRom:
    """Reduced optimality system in the union coordinates of [V_pr, V_du]."""

    def __init__(self, variant, n_pr, n_du, operator, rhs, linear, quadratic, tikhonov,
                 constants, residual=None, bases=None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if n_pr == 0 or n_du == 0:
            raise ValueError("reduced spaces must be non-empty")
        if variant == "pg" and n_pr != n_du:
            raise RomSingularError("pg variant needs equal primal and dual dimensions")
        self.variant = variant
        self.n_pr, self.n_du = n_pr, n_du
        self.operator, self.rhs = operator, rhs
        self.linear, self.quadratic = linear, quadratic
        self.tikhonov = tikhonov
        self.constants = constants
        self.residual = residual
        self.bases = bases
        self.sp = slice(0, n_pr)
        self.sd = slice(n_pr, n_pr + n_du)

    @property
    def num_parameters(self) -> int:
        return self.operator.theta.num_parameters

    @property
    def has_estimators(self) -> bool:
        return self.residual is not None

    # embedding helpers
    def _up(self, x):
        out = np.zeros(self.n_pr + self.n_du)
        out[self.sp] = x
        return out

    def _ud(self, x):
        out = np.zeros(self.n_pr + self.n_du)
        out[self.sd] = x
        return out

    def _evaluated(self, mu):
        return (self.operator.evaluate(mu), self.quadratic.evaluate(mu),
                self.rhs.evaluate(mu), self.linear.evaluate(mu))

    def solve(self, mu) -> RomSolution:
        mu = np.asarray(mu, dtype=float)
        A, K, l, j = self._evaluated(mu)
        sp_, sd = self.sp, self.sd
        if self.variant == "pg":
            u = _solve_dense(A[sd, sp_], l[sd])
            p = _solve_dense(A[sp_, sd], j[sp_] + 2.0 * K[sp_, sp_] @ u)
            return RomSolution(mu, u, p, cache={"A": A, "K": K, "l": l, "j": j})
        u = _solve_dense(A[sp_, sp_], l[sp_])
        p = _solve_dense(A[sd, sd], j[sd] + 2.0 * K[sd, sp_] @ u)
        sol = RomSolution(mu, u, p, cache={"A": A, "K": K, "l": l, "j": j})
        if self.variant == "ncd":
            sol.z = _solve_dense(A[sd, sd], -l[sd] + A[sd, sp_] @ u)
            sol.w = _solve_dense(A[sp_, sp_], j[sp_] + 2.0 * K[sp_, sp_] @ u - A[sp_, sd] @ p
                                 - 2.0 * K[sp_, sd] @ sol.z)
        return sol

    def reconstruct(self, coefficients, role="primal") -> np.ndarray:
        if self.bases is None:
            raise ValueError("rom carries no bases")
        return self.bases[0 if role == "primal" else 1] @ coefficients

    def primal_residual_at_dual(self, sol: RomSolution) -> float:
        c = sol.cache
        return float(c["l"][self.sd] @ sol.p - sol.p @ (c["A"][self.sd, self.sp] @ sol.u))

    def standard_functional(self, sol: RomSolution) -> float:
        c = sol.cache
        u = sol.u
        return float(self.tikhonov.value(sol.mu) + c["j"][self.sp] @ u
                     + u @ (c["K"][self.sp, self.sp] @ u))

    def functional(self, sol: RomSolution) -> float:
        val = self.standard_functional(sol)
        if self.variant == "ncd":
            val += self.primal_residual_at_dual(sol)
        return val

    def value(self, mu) -> float:
        return self.functional(self.solve(mu))

    def _adjoint_formula(self, mu, xu, xp, xz, xw):
        q = xp + xw
        lin, quad, rhs, op = self.linear, self.quadratic, self.rhs, self.operator
        return (self.tikhonov.gradient(mu)
                + lin.theta.coefficients.T @ (_scalars(lin._stack, xu) - _scalars(lin._stack, xz))
                + quad.theta.coefficients.T @ (_scalars(quad._stack, xu)
                                               - 2.0 * _scalars(quad._stack, xz, xu))
                + rhs.theta.coefficients.T @ _scalars(rhs._stack, q)
                - op.theta.coefficients.T @ (_scalars(op._stack, xu, q) - _scalars(op._stack, xz, xp)))

    def gradient(self, sol: RomSolution, mode: str | None = None) -> np.ndarray:
        mode = mode or {"standard": "inexact", "ncd": "ncd_adjoint", "pg": "pg"}[self.variant]
        if mode not in GRADIENT_MODES:
            raise ValueError(f"unknown gradient mode {mode!r}")
        if mode == "pg" and self.variant != "pg" or mode != "pg" and self.variant == "pg":
            raise ValueError(f"gradient mode {mode!r} incompatible with variant {self.variant!r}")
        if mode.startswith("ncd") and self.variant != "ncd":
            raise ValueError("NCD gradients need the ncd variant")
        xu, xp = self._up(sol.u), self._ud(sol.p)
        zero = np.zeros_like(xu)
        if mode in ("inexact", "pg"):
            return self._adjoint_formula(sol.mu, xu, xp, zero, zero)
        if mode == "ncd_adjoint":
            return self._adjoint_formula(sol.mu, xu, xp, self._ud(sol.z), self._up(sol.w))
        return self._sensitivity_gradient(sol)

    def parameter_sensitivities(self, sol: RomSolution):
        """Reduced d_i u_r in V_pr and d_i p_r in V_du for every canonical direction."""
        if "sens" in sol.cache:
            return sol.cache["sens"]
        c = sol.cache
        A, K = c["A"], c["K"]
        sp_, sd = self.sp, self.sd
        xu, xp = self._up(sol.u), self._ud(sol.p)
        dus, dps = [], []
        for i in range(self.num_parameters):
            dA = self.operator.derivative(i)
            dK = self.quadratic.derivative(i)
            du = _solve_dense(A[sp_, sp_], self.rhs.derivative(i)[sp_] - (dA @ xu)[sp_])
            rhs = (self.linear.derivative(i)[sd] + 2.0 * (dK @ xu)[sd] - (dA @ xp)[sd]
                   + 2.0 * K[sd, sp_] @ du)
            dps.append(_solve_dense(A[sd, sd], rhs))
            dus.append(du)
        sol.cache["sens"] = (dus, dps)
        return dus, dps

    def _sensitivity_gradient(self, sol: RomSolution) -> np.ndarray:
        c = sol.cache
        A, K, l, j = c["A"], c["K"], c["l"], c["j"]
        sp_, sd = self.sp, self.sd
        xu, xp = self._up(sol.u), self._ud(sol.p)
        zero = np.zeros_like(xu)
        g = self._adjoint_formula(sol.mu, xu, xp, zero, zero)
        dus, dps = self.parameter_sensitivities(sol)
        res_pr = l[sd] - A[sd, sp_] @ sol.u
        res_du = j[sp_] + 2.0 * K[sp_, sp_] @ sol.u - A[sp_, sd] @ sol.p
        for i in range(self.num_parameters):
            g[i] += res_pr @ dps[i] + res_du @ dus[i]
        return g

    def hessian_vec(self, sol: RomSolution, eta) -> np.ndarray:
        """Exact Hessian of the NCD functional applied to eta (forward-mode differentiation)."""
        if self.variant != "ncd":
            raise ValueError("the true reduced Hessian is implemented for the ncd variant")
        eta = np.asarray(eta, dtype=float)
        c = sol.cache
        A, K = c["A"], c["K"]
        dA, dK = self.operator.directional(eta), self.quadratic.directional(eta)
        dl, dj = self.rhs.directional(eta), self.linear.directional(eta)
        sp_, sd = self.sp, self.sd
        u, p, z, w = sol.u, sol.p, sol.z, sol.w
        du = _solve_dense(A[sp_, sp_], dl[sp_] - dA[sp_, sp_] @ u)
        dp = _solve_dense(A[sd, sd], dj[sd] + 2.0 * dK[sd, sp_] @ u + 2.0 * K[sd, sp_] @ du
                          - dA[sd, sd] @ p)
        dz = _solve_dense(A[sd, sd], -dl[sd] + dA[sd, sp_] @ u + A[sd, sp_] @ du - dA[sd, sd] @ z)
        dw = _solve_dense(A[sp_, sp_], dj[sp_] + 2.0 * dK[sp_, sp_] @ u + 2.0 * K[sp_, sp_] @ du
                          - dA[sp_, sd] @ p - A[sp_, sd] @ dp - 2.0 * dK[sp_, sd] @ z
                          - 2.0 * K[sp_, sd] @ dz - dA[sp_, sp_] @ w)
        xu, xp, xz, xw = self._up(u), self._ud(p), self._ud(z), self._up(w)
        dxu, dxp, dxz, dxw = self._up(du), self._ud(dp), self._ud(dz), self._up(dw)
        q, dq = xp + xw, dxp + dxw
        lin, quad, rhs, op = self.linear, self.quadratic, self.rhs, self.operator
        return (self.tikhonov.hessian(sol.mu) @ eta
                + lin.theta.coefficients.T @ (_scalars(lin._stack, dxu) - _scalars(lin._stack, dxz))
                + quad.theta.coefficients.T @ (2.0 * _scalars(quad._stack, dxu, xu)
                                               - 2.0 * _scalars(quad._stack, dxu, xz)
                                               - 2.0 * _scalars(quad._stack, dxz, xu))
                + rhs.theta.coefficients.T @ _scalars(rhs._stack, dq)
                - op.theta.coefficients.T @ (_scalars(op._stack, xu, dq) + _scalars(op._stack, dxu, q)
                                             - _scalars(op._stack, xz, dxp)
                                             - _scalars(op._stack, dxz, xp)))

    # estimators
    def _coef(self, l=None, j=None, a=(), k=()):
        cst = self.constants
        nu = self.n_pr + self.n_du
        parts = [np.zeros(cst["n_l"]) if l is None else l,
                 np.zeros(cst["n_j"]) if j is None else j]
        block = np.zeros((cst["n_a"], nu))
        for wts, x in a:
            block += np.outer(wts, x)
        parts.append(block.ravel())
        block = np.zeros((cst["n_k"], nu))
        for wts, x in k:
            block += np.outer(wts, x)
        parts.append(block.ravel())
        return np.concatenate(parts)

    def _require_estimators(self):
        if self.residual is None:
            raise RuntimeError("estimator data was not assembled for this rom")

    def stability(self, mu):
        ratio = theta_ratios(self.operator.theta, self.constants["mu_check"], mu)
        return float(ratio.min()), float(ratio.max())

    def k_norm(self, mu) -> float:
        return float(np.abs(self.quadratic.theta(mu)) @ self.constants["k_component_norms"])

    def residual_norms(self, sol: RomSolution):
        self._require_estimators()
        if "res_norms" in sol.cache:
            return sol.cache["res_norms"]
        mu = sol.mu
        xu, xp = self._up(sol.u), self._ud(sol.p)
        ta, tk = self.operator.theta(mu), self.quadratic.theta(mu)
        r_pr = self.residual.norm(self._coef(l=self.rhs.theta(mu), a=[(-ta, xu)]))
        r_du = self.residual.norm(self._coef(j=self.linear.theta(mu), k=[(2.0 * tk, xu)], a=[(-ta, xp)]))
        sol.cache["res_norms"] = (r_pr, r_du)
        return r_pr, r_du

    def primal_estimate(self, sol) -> float:
        alpha, _ = self.stability(sol.mu)
        return self.residual_norms(sol)[0] / alpha

    def dual_estimate(self, sol) -> float:
        alpha, _ = self.stability(sol.mu)
        r_pr, r_du = self.residual_norms(sol)
        return (2.0 * self.k_norm(sol.mu) * r_pr / alpha + r_du) / alpha

    def functional_estimate(self, sol, kind: str | None = None) -> float:
        kind = kind or self.variant
        d_pr = self.primal_estimate(sol)
        _, r_du = self.residual_norms(sol)
        est = d_pr * r_du + d_pr ** 2 * self.k_norm(sol.mu)
        if kind == "standard":
            est += abs(self.primal_residual_at_dual(sol))
        return est

    def _derivative_norms(self, mu):
        cst = self.constants
        ca = self.operator.theta.coefficients
        ck = self.quadratic.theta.coefficients
        a_check = self.operator.theta(cst["mu_check"])
        return (np.abs(ca).T @ (1.0 / np.abs(a_check)),
                np.abs(ck).T @ cst["k_component_norms"],
                cst["dl_norms"], cst["dj_norms"])

    def gradient_estimate(self, sol, kind: str = "inexact") -> np.ndarray:
        """Per-component bounds on |grad J_h - reduced gradient|; use np.linalg.norm for the total."""
        mu = sol.mu
        alpha, cont = self.stability(mu)
        da, dk, dl, dj = self._derivative_norms(mu)
        d_pr, d_du = self.primal_estimate(sol), self.dual_estimate(sol)
        nu, np_ = np.linalg.norm(sol.u), np.linalg.norm(sol.p)
        if kind in ("inexact", "pg"):
            return (2.0 * d_pr * nu * dk + d_pr * (dj + da * np_) + d_du * (dl + da * nu)
                    + d_pr * d_du * da + d_pr ** 2 * dk)
        if kind == "ncd_adjoint":
            base = self.gradient_estimate(sol, "inexact")
            r_pr, r_du = self.residual_norms(sol)
            knorm = self.k_norm(mu)
            w_bound = (r_du + 2.0 * knorm * r_pr / alpha) / alpha
            z_bound = r_pr / alpha
            return base + (dl + da * nu) * w_bound + z_bound * (dj + 2.0 * dk * nu + da * np_)
        if kind == "ncd_sensitivity":
            dus, dps = self.parameter_sensitivities(sol)
            xu, xp = self._up(sol.u), self._ud(sol.p)
            ta, tk = self.operator.theta(mu), self.quadratic.theta(mu)
            ca, ck = self.operator.theta.coefficients, self.quadratic.theta.coefficients
            cl, cj = self.rhs.theta.coefficients, self.linear.theta.coefficients
            out = np.zeros(self.num_parameters)
            for i in range(self.num_parameters):
                xdu, xdp = self._up(dus[i]), self._ud(dps[i])
                r_pr_i = self.residual.norm(self._coef(l=cl[:, i], a=[(-ca[:, i], xu), (-ta, xdu)]))
                r_du_i = self.residual.norm(self._coef(j=cj[:, i], k=[(2.0 * ck[:, i], xu), (2.0 * tk, xdu)],
                                                       a=[(-ca[:, i], xp), (-ta, xdp)]))
                d_dpr = (da[i] * d_pr + r_pr_i) / alpha
                out[i] = dk[i] * d_pr ** 2 + cont * d_dpr * d_du + r_du_i * d_pr
            return out
        raise ValueError(f"unknown gradient estimate {kind!r}")

    def estimate(self, sol, quantity: str):
        table = {
            "primal": lambda: self.primal_estimate(sol),
            "dual": lambda: self.dual_estimate(sol),
            "functional": lambda: self.functional_estimate(sol),
            "functional_standard": lambda: self.functional_estimate(sol, "standard"),
            "functional_ncd": lambda: self.functional_estimate(sol, "ncd"),
            "gradient_standard": lambda: self.gradient_estimate(sol, "inexact"),
            "gradient_ncd_adjoint": lambda: self.gradient_estimate(sol, "ncd_adjoint"),
            "gradient_ncd_sens": lambda: self.gradient_estimate(sol, "ncd_sensitivity"),
            "pg_primal": lambda: self.primal_estimate(sol),
            "pg_dual": lambda: self.dual_estimate(sol),
            "pg_functional": lambda: self.functional_estimate(sol, "pg"),
        }
        if quantity not in table:
            raise ValueError(f"unknown estimate {quantity!r}")
        return table[quantity]()

    # persistence
    def save(self, path) -> None:
        arrays = {}
        meta = {"variant": self.variant, "n_pr": self.n_pr, "n_du": self.n_du,
                "stable": None if self.residual is None else self.residual.stable,
                "constants": {k: v for k, v in self.constants.items()
                              if isinstance(v, (int, float))}}
        for name in ("operator", "rhs", "linear", "quadratic"):
            form = getattr(self, name)
            arrays[name] = form._stack
            arrays[name + "_offset"] = form.theta.offset
            arrays[name + "_coefficients"] = form.theta.coefficients
        for key in ("mu_check", "k_component_norms", "dl_norms", "dj_norms"):
            arrays["const_" + key] = np.asarray(self.constants[key])
        arrays["tik_weights"] = self.tikhonov.weights
        arrays["tik_target"] = self.tikhonov.target
        meta["tik_offset"] = self.tikhonov.offset
        if self.residual is not None:
            arrays["residual_matrix"] = self.residual.matrix
        if self.bases is not None:
            arrays["basis_primal"], arrays["basis_dual"] = self.bases
        np.savez(path, meta=np.array(json.dumps(meta)), **arrays)

    @staticmethod
    def load(path) -> "GlobalRom":
        data = np.load(path, allow_pickle=False)
        meta = json.loads(str(data["meta"]))
        forms = {}
        for name in ("operator", "rhs", "linear", "quadratic"):
            theta = AffineTheta(data[name + "_offset"], data[name + "_coefficients"])
            forms[name] = ProjectedForm(list(data[name]), theta)
        constants = dict(meta["constants"])
        for key in ("mu_check", "k_component_norms", "dl_norms", "dj_norms"):
            constants[key] = data["const_" + key]
        residual = None
        if "residual_matrix" in data:
            residual = ResidualData.__new__(ResidualData)
            residual.stable = meta["stable"]
            residual.matrix = data["residual_matrix"]
        bases = (data["basis_primal"], data["basis_dual"]) if "basis_primal" in data else None
        tik = TikhonovTerm(data["tik_weights"], data["tik_target"], meta["tik_offset"])
        return GlobalRom(meta["variant"], meta["n_pr"], meta["n_du"], forms["operator"], forms["rhs"],
                         forms["linear"], forms["quadratic"], tik, constants, residual, bases)


class GlobalReductor:
    """Owns the reduced spaces of a FomSystem and builds reduced models from them."""

    def __init__(self, fom: FomSystem, stable: bool = True, spaces: RbSpaces | None = None,
                 tol: float = 1e-10):
        self.fom = fom
        self.stable = stable
        self.tol = tol
        self.product = fom.energy_product
        self.product_lu = factorize(self.product)
        self.spaces = spaces or RbSpaces.empty(fom.num_dofs)
        self.counters = Counter()
        a_check = fom.operator.theta(fom.mu_check)
        if np.any(a_check <= 0.0):
            raise ValueError("energy product needs theta_xi(mu_check) > 0")
        obj = fom.objective
        self._k_norms = np.array([self._component_norm(K) for K in obj.quadratic.components])
        P = fom.num_parameters
        self._dl_norms = np.array([self._dual_norm(fom.rhs.derivative(i)) for i in range(P)])
        self._dj_norms = np.array([self._dual_norm(obj.linear.derivative(i)) for i in range(P)])

    def _dual_norm(self, g) -> float:
        g = np.asarray(g, dtype=float)
        return float(np.sqrt(max(g @ self.product_lu.solve(g), 0.0)))

    def _component_norm(self, K) -> float:
        """Largest |generalized eigenvalue| of (K, energy product)."""
        n = K.shape[0]
        if K.nnz == 0:
            return 0.0
        if n <= 400:
            import scipy.linalg
            vals = scipy.linalg.eigh(K.toarray(), self.product.toarray(), eigvals_only=True)
            return float(np.max(np.abs(vals)))
        op = spla.LinearOperator((n, n), matvec=lambda x: self.product_lu.solve(K @ x), dtype=float)
        val = spla.eigs(op, k=1, which="LM", return_eigenvectors=False, tol=1e-10)
        return float(abs(val[0])) * (1.0 + 1e-8)

    def enrich(self, mu=None, strategy: str = "lagrange", eta=None, solution: FomSolution | None = None):
        """Add FOM snapshots at mu; returns the FOM solution (value and gradient filled)."""
        fom = self.fom
        sol = solution if solution is not None else fom.value_and_gradient(mu)
        if sol.value is None:
            sol.value = fom.objective_value(sol.mu, sol.u)
            sol.gradient = fom.gradient(sol.mu, sol.u, sol.p)
        P = self.product
        if strategy == "lagrange":
            self.spaces.extend("primal", sol.u, P, self.tol)
            self.spaces.extend("dual", sol.p, P, self.tol)
        elif strategy == "aggregate":
            for role in ("primal", "dual"):
                self.spaces.extend(role, [sol.u, sol.p], P, self.tol)
        elif strategy == "directional_taylor":
            if eta is None:
                raise ValueError("directional Taylor enrichment needs a direction")
            eta = np.asarray(eta, dtype=float)
            nrm = np.linalg.norm(eta)
            vecs_u, vecs_p = [sol.u], [sol.p]
            if nrm > 0:
                du = fom.solve_sensitivity(sol, eta / nrm, "primal")
                dp = fom.solve_sensitivity(sol, eta / nrm, "dual", primal_sensitivity=du)
                vecs_u.append(du)
                vecs_p.append(dp)
            self.spaces.extend("primal", vecs_u, P, self.tol)
            self.spaces.extend("dual", vecs_p, P, self.tol)
        else:
            raise ValueError(f"unknown enrichment strategy {strategy!r}")
        return sol

    def build_rom(self, variant: str = "ncd", estimators: bool = True) -> GlobalRom:
        fom = self.fom
        Vp, Vd = self.spaces.primal, self.spaces.dual
        if Vp.shape[1] == 0 or Vd.shape[1] == 0:
            raise ValueError("cannot build a rom from empty spaces")
        U = np.column_stack([Vp, Vd])
        obj = fom.objective
        op = fom.operator.project(U)
        quad = obj.quadratic.project(U)
        rhs = fom.rhs.project(U)
        lin = obj.linear.project(U)
        constants = {"mu_check": fom.mu_check, "k_component_norms": self._k_norms,
                     "dl_norms": self._dl_norms, "dj_norms": self._dj_norms,
                     "n_l": fom.rhs.theta.num_terms, "n_j": obj.linear.theta.num_terms,
                     "n_a": fom.operator.theta.num_terms, "n_k": obj.quadratic.theta.num_terms}
        residual = None
        if estimators:
            gens = ([np.asarray(c, dtype=float) for c in fom.rhs.components]
                    + [np.asarray(c, dtype=float) for c in obj.linear.components])
            gens += [np.asarray(A @ U) for A in fom.operator.components]
            gens += [np.asarray(K @ U) for K in obj.quadratic.components]
            G = np.column_stack([g[:, None] if g.ndim == 1 else g for g in gens])
            residual = ResidualData(G, self.product, self.product_lu, self.stable)
            self.counters["estimator_assembly"] += 1
        return GlobalRom(variant, Vp.shape[1], Vd.shape[1], op, rhs, lin, quad, obj.theta,
                         constants, residual, (Vp, Vd))


def parameter_estimate(mu, fom_gradient, box, lambda_min: float):
    """Distance bound to the FOM optimum from the clipped FOM gradient."""
    if not lambda_min > 0.0:
        return "second-order condition not verified"
    mu = np.asarray(mu, dtype=float)
    g = np.asarray(fom_gradient, dtype=float)
    zeta = -g.copy()
    at_lo = mu <= box.lower
    at_hi = mu >= box.upper
    zeta[at_lo] = -np.minimum(0.0, g[at_lo])
    zeta[at_hi] = -np.maximum(0.0, g[at_hi])
    return 2.0 / lambda_min * float(np.linalg.norm(zeta))


def smallest_hessian_eigenvalue(fom: FomSystem, mu) -> float:
    return float(np.linalg.eigvalsh(fom.hessian_matrix(mu))[0])


@dataclass
class GreedyResult:
    rom: GlobalRom
    reductor: GlobalReductor
    selected: list
    max_estimates: list


def weak_greedy(fom: FomSystem, training, max_size: int = 5, tol: float = 0.0, variant: str = "ncd",
                strategy: str = "lagrange", quantity: str = "primal") -> GreedyResult:
    """Enrich at the training parameter with the largest estimate until ``tol`` or ``max_size``."""
    training = np.atleast_2d(np.asarray(training, dtype=float))
    reductor = GlobalReductor(fom)
    selected, maxes = [], []
    nxt = 0
    rom = None
    while len(selected) < max_size:
        reductor.enrich(training[nxt], strategy)
        selected.append(nxt)
        rom = reductor.build_rom(variant)
        est = np.array([rom.estimate(rom.solve(mu), quantity) for mu in training])
        est[selected] = -np.inf
        maxes.append(float(est.max()) if np.isfinite(est.max()) else 0.0)
        if maxes[-1] <= tol:
            break
        nxt = int(np.argmax(est))
    return GreedyResult(rom, reductor, selected, maxes)
