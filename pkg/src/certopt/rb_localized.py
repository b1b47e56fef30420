"""Localized reduced models on top of the PG-LOD.

Stage 1 reduces every patch corrector problem, RBLOD assembles the coarse system from
those reduced correctors, and Stage 2 compresses the resulting two-scale problem with a
least-squares reduced basis. ``LocalizedCertifiedModel`` wraps either variant for the
trust-region driver.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .fom_opt import SingularSystemError, factorize
from .lod_two_scale import (LodOptimization, Patch, PgLod, TwoScaleConstants,
                            TwoScaleVector, map_elements)
from .trust_region import FomData

REJECT_TOL = 1e-11


def _orthonormalize(basis: np.ndarray, vectors: np.ndarray, product, tol: float = REJECT_TOL,
                    project=None):
    """Gram-Schmidt with one re-orthogonalization pass; returns the accepted new columns.

    ``project`` maps a vector back onto the admissible subspace after each pass, which
    keeps round-off of nearly dependent vectors from leaving it.
    """
    new = []
    cur = basis
    for v in np.asarray(vectors, dtype=float).T:
        v = v.copy()
        n0 = math.sqrt(max(float(v @ product(v)), 0.0))
        if n0 == 0.0:
            continue
        for _ in range(2):
            if cur.shape[1]:
                v -= cur @ (cur.T @ product(v))
            if project is not None:
                v = project(v)
        n1 = math.sqrt(max(float(v @ product(v)), 0.0))
        if n1 <= tol * n0:
            continue
        v /= n1
        new.append(v)
        cur = np.column_stack([cur, v])
    if not new:
        return np.zeros((basis.shape[0], 0))
    return np.column_stack(new)


class Stage1Rom:
    """Reduced corrector model of one coarse element, shared by all its shape functions.

    The basis is orthonormal in the energy product at ``energy_mu``. Residual norms are
    evaluated in an H1-orthonormal basis ``W`` of all Riesz representatives, so the
    estimator is computed from small dense arrays only.
    """

    def __init__(self, lod: PgLod | None, patch: Patch | None, alpha: float, energy_mu=None,
                 with_residual: bool = True):
        self.lod = lod
        self.patch = patch
        self.alpha = float(alpha)
        if lod is None:
            return
        Xi, J = lod.num_components, patch.num_shapes
        mu_e = (lod.box.center if lod.box is not None else np.zeros(lod.num_parameters)) \
            if energy_mu is None else np.asarray(energy_mu, dtype=float)
        self.energy_theta = lod.operator.theta(mu_e)
        comps = lod.patch_components(patch)
        self.active = np.array([c.nnz > 0 and bool(np.any(c.data)) for c in comps])
        self.element = patch.element
        self.shape_rows = patch.shape_rows
        self.shape_dofs = patch.shape_dofs
        self.coarse_nodes = patch.coarse_nodes
        self.K0 = lod.element_stiffness_components(patch)
        n = patch.num_interior
        self.basis = np.zeros((n, 0))
        self.W = np.zeros((n, 0))
        self.with_residual = False
        self.A_red = np.zeros((Xi, 0, 0))
        self.G_red = np.zeros((Xi, 0, J))
        self.K_rb = np.zeros((Xi, patch.coarse_nodes.size, 0))
        self.A_hat = np.zeros((Xi, 0, 0))
        self.G_hat = np.zeros((Xi, 0, J))
        self.S_red = np.zeros((0, 0))
        if with_residual:
            self.build_residual_basis()

    # sizes ----------------------------------------------------------------

    @property
    def size(self) -> int:
        return self.A_red.shape[1]

    @property
    def residual_size(self) -> int:
        return self.A_hat.shape[1]

    @property
    def num_shapes(self) -> int:
        return self.K0.shape[1]

    @property
    def num_components(self) -> int:
        return self.K0.shape[0]

    # offline --------------------------------------------------------------

    def _fine_data(self):
        lod, patch = self.lod, self.patch
        comps = lod.patch_components(patch)
        A_int = [c[patch.interior_pos] for c in comps]
        G = lod.shape_rhs_components(patch)
        return comps, A_int, G

    def _energy(self, A_int):
        E = sum(t * A for t, A, a in zip(self.energy_theta, A_int, self.active) if a)
        return lambda v: E @ v

    def _kernel_product(self):
        S = self.lod.pair.fine_stiffness[self.patch.interior][:, self.patch.interior]
        return lambda v: S @ v, S

    def _orthonormalize_residuals(self, reps) -> np.ndarray:
        prod, S = self._kernel_product()
        solver = self.lod.stiffness_solver(self.patch)
        return _orthonormalize(self.W, reps, prod, project=lambda v: solver.solve(S @ v))

    def extend(self, snapshots: np.ndarray) -> int:
        """Add exact corrector snapshots (interior x k); returns the number of accepted vectors."""
        if self.lod is None:
            raise RuntimeError("a loaded Stage-1 model cannot be enriched")
        comps, A_int, G = self._fine_data()
        new = _orthonormalize(self.basis, np.atleast_2d(snapshots.T).T, self._energy(A_int))
        if new.shape[1] == 0:
            return 0
        self.basis = np.column_stack([self.basis, new])
        if self.with_residual:
            solver = self.lod.stiffness_solver(self.patch)
            reps = [solver.solve(A_int[x] @ new) for x in np.flatnonzero(self.active)]
            self.W = np.column_stack([self.W, self._orthonormalize_residuals(np.column_stack(reps))])
        self._assemble(comps, A_int, G)
        return new.shape[1]

    def build_residual_basis(self) -> None:
        """(Re)build the residual basis from the current reduced space."""
        comps, A_int, G = self._fine_data()
        solver = self.lod.stiffness_solver(self.patch)
        reps = []
        for x in np.flatnonzero(self.active):
            reps.append(solver.solve(G[x]))
            if self.size:
                reps.append(solver.solve(A_int[x] @ self.basis))
        self.W = np.zeros((self.patch.num_interior, 0))
        if reps:
            self.W = self._orthonormalize_residuals(np.column_stack(reps))
        self.with_residual = True
        self._assemble(comps, A_int, G)

    def _assemble(self, comps, A_int, G) -> None:
        Xi, J = self.num_components, self.num_shapes
        psi, W = self.basis, self.W
        N, M = psi.shape[1], W.shape[1]
        Pc = self.patch.prolongation
        self.A_red = np.zeros((Xi, N, N))
        self.G_red = np.zeros((Xi, N, J))
        self.K_rb = np.zeros((Xi, Pc.shape[1], N))
        self.A_hat = np.zeros((Xi, M, N))
        self.G_hat = np.zeros((Xi, M, J))
        for x in np.flatnonzero(self.active):
            Apsi = A_int[x] @ psi
            self.A_red[x] = psi.T @ Apsi
            self.G_red[x] = psi.T @ G[x]
            self.K_rb[x] = -(Pc.T @ (comps[x] @ psi))
            self.A_hat[x] = W.T @ Apsi
            self.G_hat[x] = W.T @ G[x]
        _, S = self._kernel_product()
        self.S_red = psi.T @ (S @ psi)

    # online ---------------------------------------------------------------

    def solve(self, theta) -> np.ndarray:
        """Reduced corrector coefficients for all shape functions (N_T x J_T)."""
        if self.size == 0:
            return np.zeros((0, self.num_shapes))
        A = np.tensordot(theta, self.A_red, axes=1)
        G = np.tensordot(theta, self.G_red, axes=1)
        try:
            return np.linalg.solve(A, G)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"singular Stage-1 system on element {self.element}") from exc

    def residual_coordinates(self, theta, C) -> np.ndarray:
        """Coordinates of the corrector residual Riesz representatives in W (M_T x J_T)."""
        if not self.with_residual:
            raise RuntimeError("residual basis has not been assembled")
        res = np.tensordot(theta, self.G_hat, axes=1)
        if self.size:
            res = res - np.tensordot(theta, self.A_hat, axes=1) @ C
        return res

    def estimate(self, theta, C=None) -> np.ndarray:
        """Energy-error bound per shape function."""
        C = self.solve(theta) if C is None else C
        return np.linalg.norm(self.residual_coordinates(theta, C), axis=0) / math.sqrt(self.alpha)

    def coupling(self, theta, C) -> np.ndarray:
        """Element block of the reduced multiscale stiffness (coarse_nodes x J_T)."""
        block = np.zeros((self.K_rb.shape[1], self.num_shapes))
        if self.size:
            block += np.tensordot(theta, self.K_rb, axes=1) @ C
        block[self.shape_rows] += np.tensordot(theta, self.K0, axes=1)
        return block

    def reconstruct(self, coefficients) -> np.ndarray:
        return self.basis @ coefficients

    # persistence ----------------------------------------------------------

    ARRAYS = ("A_red", "G_red", "K_rb", "K0", "A_hat", "G_hat", "S_red", "shape_rows",
              "shape_dofs", "coarse_nodes", "active")

    def to_arrays(self, prefix: str = "") -> dict:
        out = {prefix + k: getattr(self, k) for k in self.ARRAYS}
        out[prefix + "scalars"] = np.array([self.alpha, self.element, float(self.with_residual)])
        return out

    @classmethod
    def from_arrays(cls, data, prefix: str = "") -> "Stage1Rom":
        scal = data[prefix + "scalars"]
        rom = cls(None, None, float(scal[0]))
        for k in cls.ARRAYS:
            setattr(rom, k, np.asarray(data[prefix + k]))
        rom.element = int(scal[1])
        rom.with_residual = bool(scal[2])
        rom.basis = np.zeros((0, rom.A_red.shape[1]))
        return rom


@dataclass
class GreedyTrace:
    element: int
    steps: list = field(default_factory=list)     # (basis size, training index, shape index, eta)
    status: str = ""


def stage1_greedy(lod: PgLod, patch: Patch, training, eps1: float, alpha: float,
                  rom: Stage1Rom | None = None, max_size: int | None = None):
    """Weak greedy over (training parameter, shape function) pairs; returns (rom, trace)."""
    training = np.atleast_2d(np.asarray(training, dtype=float))
    if training.shape[0] == 0:
        raise ValueError("training set is empty")
    if eps1 <= 0:
        raise ValueError("eps1 must be positive")
    rom = Stage1Rom(lod, patch, alpha) if rom is None else rom
    if not rom.with_residual:
        rom.build_residual_basis()
    thetas = [lod.operator.theta(mu) for mu in training]
    limit = patch.num_interior - patch.constraint.shape[0] if max_size is None else max_size
    snapshots: dict = {}
    trace = GreedyTrace(patch.element)
    while True:
        etas = np.array([rom.estimate(th) for th in thetas])
        i, j = np.unravel_index(int(np.argmax(etas)), etas.shape)
        eta = float(etas[i, j])
        trace.steps.append((rom.size, int(i), int(j), eta))
        if eta <= eps1:
            trace.status = "converged"
            break
        if rom.size >= limit:
            trace.status = "exact_space"
            break
        if i not in snapshots:
            snapshots[i] = lod.corrector(patch, training[i]).correctors
        if rom.extend(snapshots[i][:, [j]]) == 0:
            trace.status = "degenerate"
            break
    return rom, trace


def stage1_build(lod: PgLod, training, eps1: float, alpha: float, threads: int = 1):
    """Stage-1 greedy on every coarse element; returns (roms, traces)."""
    out = map_elements(lambda p: stage1_greedy(lod, p, training, eps1, alpha), lod.pair.patches,
                       threads)
    return [r for r, _ in out], [t for _, t in out]


def stage1_solve(rom: Stage1Rom, mu_theta, v_H=None):
    """(coefficients, element block, eta per shape function); ``v_H`` selects one coarse function."""
    C = rom.solve(mu_theta)
    eta = rom.estimate(mu_theta, C) if rom.with_residual else None
    if v_H is not None:
        vJ = np.asarray(v_H, dtype=float)[rom.shape_dofs]
        return C @ vJ, rom.coupling(mu_theta, C) @ vJ, (None if eta is None else
                                                         float(np.linalg.norm(rom.residual_coordinates(mu_theta, C) @ vJ)
                                                               / math.sqrt(rom.alpha)))
    return C, rom.coupling(mu_theta, C), eta


def save_stage1(roms: list, path) -> None:
    data = {}
    for t, rom in enumerate(roms):
        data.update(rom.to_arrays(f"T{t}_"))
    data["count"] = np.array([len(roms)])
    np.savez_compressed(path, **data)


def load_stage1(path) -> list:
    with np.load(path) as data:
        return [Stage1Rom.from_arrays(data, f"T{t}_") for t in range(int(data["count"][0]))]


# ---------------------------------------------------------------------------
# RBLOD


@dataclass
class RblodSolution:
    mu: np.ndarray
    theta: np.ndarray
    u: np.ndarray
    coefficients: list            # per element N_T x J_T
    stiffness: object
    value: float | None = None
    p: np.ndarray | None = None
    multiplier: np.ndarray | None = None
    gradient: np.ndarray | None = None


class LocalizedReduction:
    """RBLOD objective, gradient and two-scale estimators from a list of Stage-1 models."""

    def __init__(self, opt: LodOptimization, roms: list, constants: TwoScaleConstants):
        self.opt = opt
        self.lod = opt.lod
        self.pair = opt.lod.pair
        self.roms = roms
        self.constants = constants
        self.counters = opt.counters
        S_H = self.pair.coarse_stiffness.toarray()
        self.coarse_chol = np.linalg.cholesky(S_H)
        self.rhs_components = np.column_stack([self.pair.prolongation.T @ f
                                               for f in self.lod.rhs.components])
        self._k_norm_cache: dict = {}

    @property
    def rho(self) -> float:
        return self.constants.rho

    @property
    def factor(self) -> float:
        return math.sqrt(5.0) / self.constants.gamma_kl

    def coarse_rhs(self, mu) -> np.ndarray:
        return self.rhs_components @ self.lod.rhs.theta(mu)

    def coarse_dual_norm(self, r: np.ndarray) -> float:
        return float(np.linalg.norm(sla.solve_triangular(self.coarse_chol, r, lower=True)))

    def coarse_norm(self, v: np.ndarray) -> float:
        return float(np.linalg.norm(self.coarse_chol.T @ v))

    def stiffness(self, theta):
        coeffs = [rom.solve(theta) for rom in self.roms]
        blocks = [rom.coupling(theta, C) for rom, C in zip(self.roms, coeffs)]
        self.counters["rblod_local"] += len(self.roms)
        return self.lod.assemble_stiffness(blocks), coeffs

    def _coarse_solve(self, K, b):
        self.counters["rblod_coarse"] += 1
        return factorize(K).solve(np.asarray(b, dtype=float))

    def solve(self, mu, dual: bool = False) -> RblodSolution:
        mu = np.asarray(mu, dtype=float)
        theta = self.lod.operator.theta(mu)
        K, coeffs = self.stiffness(theta)
        u = self._coarse_solve(K, self.coarse_rhs(mu))
        sol = RblodSolution(mu, theta, u, coeffs, K, self.opt.objective.value(mu, u))
        if dual:
            self.add_dual(sol)
        return sol

    def add_dual(self, sol: RblodSolution) -> RblodSolution:
        if sol.p is None:
            dJ = self.opt.objective.state_derivative(sol.mu, sol.u)
            sol.p = self._coarse_solve(sol.stiffness, dJ)
            sol.multiplier = self._coarse_solve(sol.stiffness.T, dJ)
        return sol

    def gradient(self, sol: RblodSolution) -> np.ndarray:
        """Exact gradient of mu -> J(u_rblod(mu), mu), Stage-1 sensitivities included."""
        self.add_dual(sol)
        lam, u, theta = sol.multiplier, sol.u, sol.theta
        rhs = self.lod.rhs
        g = (self.opt.objective.parameter_gradient(sol.mu, u)
             + rhs.theta.coefficients.T @ (self.rhs_components.T @ lam))
        scal = np.zeros(self.lod.num_components)
        for rom, C in zip(self.roms, sol.coefficients):
            lam_cn = lam[rom.coarse_nodes]
            uJ = u[rom.shape_dofs]
            scal += np.einsum("j,xji,i->x", lam_cn[rom.shape_rows], rom.K0, uJ)
            if rom.size == 0:
                continue
            c = C @ uJ
            scal += np.einsum("k,xkn,n->x", lam_cn, rom.K_rb, c)
            A = np.tensordot(theta, rom.A_red, axes=1)
            y = np.linalg.solve(A.T, np.tensordot(theta, rom.K_rb, axes=1).T @ lam_cn)
            scal += np.einsum("n,xnj,j->x", y, rom.G_red, uJ) - np.einsum("n,xnm,m->x", y, rom.A_red, c)
        sol.gradient = g - self.lod.operator.theta.coefficients.T @ scal
        return sol.gradient

    # two-scale residuals --------------------------------------------------

    def fine_residuals(self, theta, coeffs, v) -> list:
        """Per-element Stage-1 residual coordinates of the tuple (v, [C_T v_J])."""
        return [rom.residual_coordinates(theta, C) @ v[rom.shape_dofs]
                for rom, C in zip(self.roms, coeffs)]

    def tuple_residual_norm(self, theta, coeffs, K, v, rhs) -> float:
        r2 = self.coarse_dual_norm(rhs - K @ v) ** 2
        r2 += self.rho * sum(float(f @ f) for f in self.fine_residuals(theta, coeffs, v))
        return math.sqrt(r2)

    def two_scale_tuple(self, sol: RblodSolution, v=None) -> TwoScaleVector:
        v = sol.u if v is None else v
        return TwoScaleVector(v.copy(), [rom.reconstruct(C @ v[rom.shape_dofs])
                                         for rom, C in zip(self.roms, sol.coefficients)])

    def k_norm(self, mu) -> float:
        """sup |k(v, w)| / (|v_H|_1 |w_H|_1): largest eigenvalue of K_J against S_H."""
        q = self.opt.objective.quadratic
        key = q.theta(mu).tobytes()
        val = self._k_norm_cache.get(key)
        if val is None:
            Kq = q.evaluate(mu)
            Kq = Kq.toarray() if hasattr(Kq, "toarray") else np.asarray(Kq)
            Linv = sla.solve_triangular(self.coarse_chol, np.eye(Kq.shape[0]), lower=True)
            val = float(np.abs(np.linalg.eigvalsh(Linv @ (0.5 * (Kq + Kq.T)) @ Linv.T)).max())
            self._k_norm_cache[key] = val
        return val

    def estimates(self, sol: RblodSolution) -> dict:
        """Primal, dual and functional estimates of an RBLOD solution."""
        self.add_dual(sol)
        c = self.constants
        mu, theta = sol.mu, sol.theta
        eta_pr = self.factor * self.tuple_residual_norm(theta, sol.coefficients, sol.stiffness, sol.u,
                                                        self.coarse_rhs(mu))
        dJ = self.opt.objective.state_derivative(mu, sol.u)
        eta_du = self.factor * self.tuple_residual_norm(theta, sol.coefficients, sol.stiffness, sol.p, dJ)
        return functional_estimates(eta_pr, eta_du, self.k_norm(mu), self.coarse_norm(sol.p), c,
                                    self.factor)


def functional_estimates(eta_pr: float, eta_du: float, lam_k: float, p_norm: float,
                         c: TwoScaleConstants, factor: float) -> dict:
    """Estimator chain shared by the RBLOD and TSRBLOD models."""
    ci, a = c.interpolation_constant, c.alpha
    k_energy = lam_k * ci ** 2 / a
    delta_du = factor * 2.0 * lam_k * ci / math.sqrt(a) * eta_pr + eta_du
    trunc = eta_pr * eta_du + p_norm / math.sqrt(a) * eta_pr
    delta_J = eta_pr * eta_du + eta_pr ** 2 * k_energy + trunc
    return dict(primal=eta_pr, dual_residual=eta_du, dual=delta_du, truncation=trunc,
                functional=delta_J, k_norm=k_energy)


# ---------------------------------------------------------------------------
# Stage 2


class Stage2Rom:
    """Least-squares two-scale reduced model: Â_xi (M x N) and rhs generators (M x K)."""

    def __init__(self, role: str, coarse_basis, fine_basis, A_hat, F_hat, factor: float,
                 parameters=None):
        self.role = role
        self.coarse_basis = coarse_basis          # n_H x N
        self.fine_basis = fine_basis              # per element N_T x N
        self.A_hat = A_hat                        # Xi x M x N
        self.F_hat = F_hat                        # M x K
        self.factor = factor
        self.parameters = [] if parameters is None else list(parameters)
        self.operations = 0

    @property
    def size(self) -> int:
        return self.coarse_basis.shape[1]

    @property
    def residual_size(self) -> int:
        return self.A_hat.shape[1]

    def solve(self, theta, rhs_weights):
        """(coarse vector, c_hat, eta, residual, pinv of A_mu)."""
        A = np.tensordot(theta, self.A_hat, axes=1)
        F = self.F_hat @ rhs_weights
        Xi, M, N = self.A_hat.shape
        self.operations = Xi * M * N + M * self.F_hat.shape[1] + 4 * M * N * N + 8 * N ** 3
        if N == 0:
            return (np.zeros(self.coarse_basis.shape[0]), np.zeros(0), self.factor * np.linalg.norm(F),
                    F, np.zeros((0, M)))
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        keep = s > s[0] * max(A.shape) * np.finfo(float).eps if s.size and s[0] > 0 else np.zeros(0, bool)
        if keep.sum() < N:
            warnings.warn("rank-deficient Stage-2 least-squares system; using minimum-norm solution",
                          RuntimeWarning, stacklevel=2)
        pinv = (Vt[keep].T / s[keep]) @ U[:, keep].T
        c = pinv @ F
        r = F - A @ c
        return self.coarse_basis @ c, c, self.factor * float(np.linalg.norm(r)), r, pinv

    def two_scale_tuple(self, c, roms) -> TwoScaleVector:
        return TwoScaleVector(self.coarse_basis @ c,
                              [rom.reconstruct(B @ c) if rom.basis.shape[0] else B @ c
                               for rom, B in zip(roms, self.fine_basis)])

    def to_arrays(self) -> dict:
        out = dict(coarse_basis=self.coarse_basis, A_hat=self.A_hat, F_hat=self.F_hat,
                   factor=np.array([self.factor]), role=np.array([self.role]),
                   parameters=np.array(self.parameters).reshape(len(self.parameters), -1))
        for t, B in enumerate(self.fine_basis):
            out[f"fine_{t}"] = B
        return out

    def save(self, path) -> None:
        np.savez_compressed(path, **self.to_arrays())

    @classmethod
    def load(cls, path) -> "Stage2Rom":
        with np.load(path) as d:
            nT = sum(1 for k in d.files if k.startswith("fine_"))
            return cls(str(d["role"][0]), d["coarse_basis"], [d[f"fine_{t}"] for t in range(nT)],
                       d["A_hat"], d["F_hat"], float(d["factor"][0]), list(d["parameters"]))


def _snapshot_product(red: LocalizedReduction):
    S_H = red.pair.coarse_stiffness
    sizes = [rom.size for rom in red.roms]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    nH = S_H.shape[0]

    def product(v):
        out = np.empty_like(v)
        out[:nH] = S_H @ v[:nH]
        for rom, a, b in zip(red.roms, offsets[:-1], offsets[1:]):
            out[nH + a:nH + b] = rom.S_red @ v[nH + a:nH + b]
        return out
    return product, offsets


def stage2_build(red: LocalizedReduction, snapshots: list, rhs_vectors: np.ndarray,
                 role: str = "primal", parameters=None) -> Stage2Rom:
    """Least-squares reduced model spanned by (coarse, Stage-1 coefficient) snapshot tuples.

    ``snapshots`` holds (v_H, [c_T]) pairs; ``rhs_vectors`` (n_H x K) are the coarse dual
    vectors of the right-hand side generators.
    """
    nH = red.pair.coarse.num_dofs
    product, offsets = _snapshot_product(red)
    stacked = np.column_stack([np.concatenate([v] + [np.asarray(c, dtype=float) for c in cs])
                               for v, cs in snapshots]) if snapshots else np.zeros((nH + offsets[-1], 0))
    basis = _orthonormalize(np.zeros((stacked.shape[0], 0)), stacked, product)
    N = basis.shape[1]
    coarse = basis[:nH]
    fine = [basis[nH + a:nH + b] for a, b in zip(offsets[:-1], offsets[1:])]
    Xi = red.lod.num_components
    res_sizes = [rom.residual_size for rom in red.roms]
    roff = np.concatenate([[0], np.cumsum(res_sizes)])
    D = nH + roff[-1]
    B = np.zeros((Xi, D, N))
    sqrt_rho = math.sqrt(red.rho)
    for x in range(Xi):
        coarse_part = np.zeros((nH, N))
        for rom, Bt, a, b in zip(red.roms, fine, roff[:-1], roff[1:]):
            if not rom.active[x]:
                continue
            VJ = coarse[rom.shape_dofs]
            blk = np.zeros((rom.coarse_nodes.size, N))
            blk[rom.shape_rows] += rom.K0[x] @ VJ
            if rom.size:
                blk += rom.K_rb[x] @ Bt
                B[x, nH + a:nH + b] = sqrt_rho * (rom.A_hat[x] @ Bt - rom.G_hat[x] @ VJ)
            else:
                B[x, nH + a:nH + b] = -sqrt_rho * (rom.G_hat[x] @ VJ)
            np.add.at(coarse_part, rom.coarse_nodes, blk)
        B[x, :nH] = sla.solve_triangular(red.coarse_chol, coarse_part, lower=True)
    R = np.zeros((D, rhs_vectors.shape[1]))
    R[:nH] = sla.solve_triangular(red.coarse_chol, rhs_vectors, lower=True)
    gens = np.column_stack([B.transpose(1, 0, 2).reshape(D, Xi * N), R])
    U, s, _ = np.linalg.svd(gens, full_matrices=False)
    keep = s > (s[0] * 1e-12 if s.size and s[0] > 0 else np.inf)
    Q = U[:, keep]
    A_hat = np.einsum("dm,xdn->xmn", Q, B)
    F_hat = Q.T @ R
    red.counters["stage2_builds"] += 1
    return Stage2Rom(role, coarse, fine, A_hat, F_hat, red.factor, parameters)


@dataclass
class Stage2Greedy:
    rom: Stage2Rom
    selected: list
    max_estimates: list
    status: str


def stage2_greedy(red: LocalizedReduction, training, eps2: float, max_size: int = 50) -> Stage2Greedy:
    """Weak greedy for the primal Stage-2 space with approximate (RBLOD) snapshots."""
    training = np.atleast_2d(np.asarray(training, dtype=float))
    rhs = red.rhs_components
    w = [red.lod.rhs.theta(mu) for mu in training]
    thetas = [red.lod.operator.theta(mu) for mu in training]
    empty = stage2_build(red, [], rhs)
    first = int(np.argmax([np.linalg.norm(empty.F_hat @ wi) for wi in w]))
    selected, snaps, maxes = [], [], []
    rom, status, nxt = empty, "max_size", first
    while len(selected) < max_size:
        if nxt in selected:
            status = "duplicate"
            break
        sol = red.solve(training[nxt])
        snaps.append((sol.u, [C @ sol.u[r.shape_dofs] for r, C in zip(red.roms, sol.coefficients)]))
        candidate = stage2_build(red, snaps, rhs, parameters=[training[i] for i in selected + [nxt]])
        if candidate.size == rom.size:
            status = "duplicate"
            snaps.pop()
            break
        rom = candidate
        selected.append(nxt)
        etas = np.array([rom.solve(t, wi)[2] for t, wi in zip(thetas, w)])
        maxes.append(float(etas.max()))
        if maxes[-1] <= eps2:
            status = "converged"
            break
        nxt = int(np.argmax(etas))
    return Stage2Greedy(rom, selected, maxes, status)


# ---------------------------------------------------------------------------
# TSRBLOD objective


@dataclass
class TsrblodSolution:
    mu: np.ndarray
    theta: np.ndarray
    u: np.ndarray
    c: np.ndarray
    eta: float
    residual: np.ndarray
    pinv: np.ndarray
    value: float
    p: np.ndarray | None = None
    c_dual: np.ndarray | None = None
    eta_dual: float | None = None
    gradient: np.ndarray | None = None


class TwoScaleReducedModel:
    """Primal and dual Stage-2 models with functional, exact gradient and estimates."""

    def __init__(self, red: LocalizedReduction, primal: Stage2Rom, dual: Stage2Rom | None = None):
        self.red = red
        self.primal = primal
        self.dual = dual
        obj = red.opt.objective
        self._j = np.column_stack([np.asarray(c) for c in obj.linear.components])
        self._nj = self._j.shape[1]

    @staticmethod
    def dual_rhs_vectors(red: LocalizedReduction, primal: Stage2Rom) -> np.ndarray:
        obj = red.opt.objective
        cols = [np.asarray(c, dtype=float) for c in obj.linear.components]
        for Kq in obj.quadratic.components:
            cols.extend((2.0 * (Kq @ primal.coarse_basis)).T)
        return np.column_stack(cols)

    def dual_weights(self, mu, c_pr) -> np.ndarray:
        obj = self.red.opt.objective
        wq = obj.quadratic.theta(mu)
        return np.concatenate([obj.linear.theta(mu), np.kron(wq, c_pr)])

    def solve(self, mu, dual: bool = False) -> TsrblodSolution:
        mu = np.asarray(mu, dtype=float)
        red = self.red
        theta = red.lod.operator.theta(mu)
        u, c, eta, r, pinv = self.primal.solve(theta, red.lod.rhs.theta(mu))
        red.counters["tsrblod"] += 1
        sol = TsrblodSolution(mu, theta, u, c, eta, r, pinv, red.opt.objective.value(mu, u))
        if dual:
            self.add_dual(sol)
        return sol

    def add_dual(self, sol: TsrblodSolution) -> TsrblodSolution:
        if sol.p is None and self.dual is not None:
            p, cd, eta, _, _ = self.dual.solve(sol.theta, self.dual_weights(sol.mu, sol.c))
            sol.p, sol.c_dual, sol.eta_dual = p, cd, eta
        return sol

    def gradient(self, sol: TsrblodSolution) -> np.ndarray:
        """Exact gradient of mu -> J(U c_hat(mu), mu) through the least-squares normal equations."""
        red, rom = self.red, self.primal
        obj = red.opt.objective
        g = obj.parameter_gradient(sol.mu, sol.u)
        if rom.size == 0:
            sol.gradient = g
            return g
        dJ = obj.state_derivative(sol.mu, sol.u)
        b = rom.coarse_basis.T @ dJ
        z = sol.pinv @ (sol.pinv.T @ b)                 # (A^T A)^+ b
        A = np.tensordot(sol.theta, rom.A_hat, axes=1)
        Az = A @ z
        scal = np.einsum("xmn,n,m->x", rom.A_hat, z, sol.residual) \
            - np.einsum("m,xmn,n->x", Az, rom.A_hat, sol.c)
        g = g + red.lod.operator.theta.coefficients.T @ scal
        g = g + red.lod.rhs.theta.coefficients.T @ (rom.F_hat.T @ Az)
        sol.gradient = g
        return g

    def estimates(self, sol: TsrblodSolution) -> dict:
        self.add_dual(sol)
        red = self.red
        eta_du = sol.eta_dual if sol.eta_dual is not None else math.inf
        p_norm = red.coarse_norm(sol.p) if sol.p is not None else math.inf
        return functional_estimates(sol.eta, eta_du, red.k_norm(sol.mu), p_norm, red.constants,
                                    red.factor)


def rblod_snapshot(sol: RblodSolution, roms, v=None):
    v = sol.u if v is None else v
    return v, [C @ v[r.shape_dofs] for r, C in zip(roms, sol.coefficients)]


def build_two_scale_model(red: LocalizedReduction, parameters) -> TwoScaleReducedModel:
    """Primal and dual Stage-2 models from RBLOD snapshots at ``parameters``."""
    sols = [red.solve(mu, dual=True) for mu in parameters]
    primal = stage2_build(red, [rblod_snapshot(s, red.roms) for s in sols], red.rhs_components,
                          "primal", parameters)
    dual = stage2_build(red, [rblod_snapshot(s, red.roms, s.p) for s in sols],
                        TwoScaleReducedModel.dual_rhs_vectors(red, primal), "dual", parameters)
    return TwoScaleReducedModel(red, primal, dual)


# ---------------------------------------------------------------------------
# local enrichment and the trust-region adapter


@dataclass
class EnrichmentReport:
    mu: np.ndarray
    enriched: list
    skipped: list
    eta_before: np.ndarray
    eta_after: np.ndarray


def local_enrich(red: LocalizedReduction, mu, tau_loc: float, correctors: list | None = None
                 ) -> EnrichmentReport:
    """Enrich the Stage-1 model of every element whose corrector estimate exceeds tau_loc."""
    mu = np.asarray(mu, dtype=float)
    theta = red.lod.operator.theta(mu)
    before = np.zeros(len(red.roms))
    after = np.zeros(len(red.roms))
    enriched, skipped = [], []
    for t, rom in enumerate(red.roms):
        if math.isinf(tau_loc):
            skipped.append(t)
            continue
        eta = float(rom.estimate(theta).max()) if rom.with_residual else math.inf
        before[t] = eta
        if eta <= tau_loc:
            skipped.append(t)
            after[t] = eta
            continue
        Q = correctors[t].correctors if correctors is not None else \
            red.lod.corrector(rom.patch, mu).correctors
        rom.extend(Q)
        enriched.append(t)
        after[t] = float(rom.estimate(theta).max()) if rom.with_residual else 0.0
    red.counters["local_enrichments"] += len(enriched)
    red.counters["local_skips"] += len(skipped)
    return EnrichmentReport(mu, enriched, skipped, before, after)


class LocalizedCertifiedModel:
    """RBLOD or TSRBLOD surrogate of a PG-LOD objective for ``run_tr``."""

    approximate_enrichment = False

    def __init__(self, opt: LodOptimization, variant: str = "tsrblod", tau_loc: float = 1e-3,
                 constants: TwoScaleConstants | None = None, energy_mu=None, adaptive: bool = True):
        if variant not in ("rblod", "tsrblod"):
            raise ValueError("variant must be 'rblod' or 'tsrblod'")
        self.opt = opt
        self.variant = variant
        self.tau_loc = float(tau_loc)
        self.adaptive = adaptive
        self.counters = opt.counters
        constants = opt.lod.constants() if constants is None else constants
        alpha = constants.alpha
        roms = [Stage1Rom(opt.lod, p, alpha, energy_mu, with_residual=False) for p in opt.pair.patches]
        self.red = LocalizedReduction(opt, roms, constants)
        self.history: list = []
        self.reports: list = []
        self.stage2: TwoScaleReducedModel | None = None
        self._estimators = False
        self._cache: dict = {}

    # model interface --------------------------------------------------------

    def _solve(self, mu):
        key = np.asarray(mu, dtype=float).tobytes()
        sol = self._cache.get(key)
        if sol is None:
            if self.variant == "rblod":
                sol = self.red.solve(mu)
            else:
                sol = self.stage2.solve(mu)
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[key] = sol
        return sol

    def value(self, mu) -> float:
        return self._solve(mu).value

    def gradient(self, mu) -> np.ndarray:
        sol = self._solve(mu)
        if sol.gradient is None:
            (self.red if self.variant == "rblod" else self.stage2).gradient(sol)
        return sol.gradient

    def hessian_vec(self, mu, eta):
        raise NotImplementedError("localized models provide first-order information only")

    def estimates(self, mu) -> dict:
        sol = self._solve(mu)
        return (self.red if self.variant == "rblod" else self.stage2).estimates(sol)

    def estimate(self, mu):
        if not self.has_estimators():
            return None
        return self.estimates(mu)["functional"]

    def fom_evaluate(self, mu, purpose: str = "check") -> FomData:
        sol = self.opt.value_and_gradient(np.asarray(mu, dtype=float))
        self.counters["fom_evaluations"] += 1
        self.counters["fom_" + purpose] += 1
        return FomData(sol.mu, sol.value, sol.gradient, sol)

    def enrich(self, mu, fom_data=None, estimators=True) -> FomData:
        if fom_data is None:
            fom_data = self.fom_evaluate(mu, "enrichment")
        need = estimators or self.variant == "tsrblod"
        if need and not self._estimators:
            self._assemble_residuals()
        tau = self.local_tolerance(fom_data) if self._estimators else 0.0
        corr = fom_data.payload.correctors if fom_data.payload is not None else None
        report = local_enrich(self.red, fom_data.mu, tau, corr)
        self.reports.append(report)
        self.history.append(np.array(fom_data.mu, dtype=float))
        if self.variant == "tsrblod":
            self.stage2 = build_two_scale_model(self.red, self.history)
        self._cache = {}
        return fom_data

    def local_tolerance(self, fom_data: FomData) -> float:
        """tau_loc, tightened to the first-order criticality measure at the enrichment point.

        A fixed tolerance lets the surrogate stagnate once its Stage-1 error dominates
        the remaining decrease; tying it to the FOM criticality measure removes that floor.
        """
        if not self.adaptive or fom_data.gradient is None:
            return self.tau_loc
        box = self.opt.box
        mu = np.asarray(fom_data.mu, dtype=float)
        foc = float(np.linalg.norm(mu - np.clip(mu - fom_data.gradient, box.lower, box.upper)))
        return min(self.tau_loc, foc)

    def _assemble_residuals(self) -> None:
        for rom in self.red.roms:
            rom.build_residual_basis()
        self.counters["estimator_assembly"] += 1
        self._estimators = True

    def assemble_estimators(self) -> None:
        if not self._estimators:
            self._assemble_residuals()
            self._cache = {}

    def has_estimators(self) -> bool:
        return self._estimators

    def basis_sizes(self) -> tuple:
        stage1 = int(sum(rom.size for rom in self.red.roms))
        if self.variant == "rblod" or self.stage2 is None:
            return (stage1,)
        return (stage1, self.stage2.primal.size, self.stage2.dual.size)

    @property
    def skip_counts(self) -> list:
        return [len(r.skipped) for r in self.reports]
