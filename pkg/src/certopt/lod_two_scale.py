"""Petrov-Galerkin LOD on structured grids and its two-scale reformulation."""
from __future__ import annotations

import math
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .discretization import (AffineForm, ElementMatrices, ParameterBox, PiecewiseConstantField,
                             StructuredGrid, assemble_component, build_grid, _shape)
from .fom_opt import QuadraticObjective, SingularSystemError, factorize, form_scalars


def default_oversampling(n_H: int) -> int:
    """First integer strictly larger than |log H|."""
    return int(math.floor(math.log(n_H))) + 1


def map_elements(fn, items, threads: int = 1) -> list:
    """Ordered map over coarse elements, optionally on a thread pool."""
    if threads <= 1:
        return [fn(t) for t in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


class KernelSolver:
    """Solve ``M w = b - C^T lam`` subject to ``C w = 0`` on one patch."""

    def __init__(self, matrix, constraint: sp.csr_matrix):
        self.constraint = sp.csr_matrix(constraint)
        self.size = matrix.shape[0]
        if self.constraint.shape[0] >= self.size > 0:
            # more constraints than unknowns: keep an independent subset of rows
            _, R, piv = sla.qr(self.constraint.T.toarray(), mode="economic", pivoting=True)
            d = np.abs(np.diag(R))
            rank = int(np.sum(d > 1e-12 * d.max())) if d.size else 0
            self.constraint = sp.csr_matrix(self.constraint[np.sort(piv[:rank])])
            if rank == self.size:
                self.size = 0
        if self.size == 0:
            self.lu = None
            return
        self.lu = factorize(matrix, symmetric=True)
        if self.constraint.shape[0]:
            self.Y = self.lu.solve(np.asarray(self.constraint.T.toarray(), dtype=float))
            S = np.atleast_2d(self.constraint @ self.Y)
            with warnings.catch_warnings():
                warnings.simplefilter("error", sla.LinAlgWarning)
                try:
                    self.S_lu = sla.lu_factor(S)
                except (sla.LinAlgError, sla.LinAlgWarning) as exc:
                    raise SingularSystemError(f"singular corrector saddle system: {exc}") from exc
        else:
            self.Y = None

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.size == 0:
            return np.zeros_like(b)
        x = self.lu.solve(b)
        if self.Y is None:
            return x
        lam = sla.lu_solve(self.S_lu, self.constraint @ x)
        return x - self.Y @ lam


@dataclass
class Patch:
    """Oversampled coarse patch U_ell(T) with its local index sets."""

    element: int
    ell: int
    coarse_range: tuple          # (x0, x1, y0, y1) half-open coarse element ranges
    interior: np.ndarray         # fine free dofs strictly inside the patch
    closure: np.ndarray          # fine free dofs of the closed patch
    interior_pos: np.ndarray     # positions of ``interior`` inside ``closure``
    coarse_nodes: np.ndarray     # coarse free dofs of the closed patch
    shape_dofs: np.ndarray       # coarse free dofs of the vertices of T
    shape_corners: np.ndarray    # which of the four corners of T they are
    shape_rows: np.ndarray       # positions of shape_dofs inside coarse_nodes
    local_to_interior: np.ndarray  # T-local fine vertex -> interior position, -1 outside
    local_to_closure: np.ndarray   # T-local fine vertex -> closure position, -1 outside
    fine_elements: np.ndarray    # fine elements of the patch
    constraint: sp.csr_matrix    # interpolation rows at coarse_nodes, interior columns
    prolongation: sp.csr_matrix  # closure x coarse_nodes values of the coarse shape functions

    @property
    def num_shapes(self) -> int:
        return self.shape_dofs.size

    @property
    def num_interior(self) -> int:
        return self.interior.size

    @property
    def size_in_elements(self) -> tuple:
        x0, x1, y0, y1 = self.coarse_range
        return (x1 - x0, y1 - y0)


class CoarsePair:
    """Nested fine and coarse grids with prolongation, interpolation and patches."""

    def __init__(self, n_h: int, n_H: int, ell: int | None = None, interpolation_constant: float = 1.0):
        if n_H < 1 or n_h % n_H:
            raise ValueError(f"coarse size {n_H} must divide fine size {n_h}")
        self.fine: StructuredGrid = build_grid(n_h)
        self.coarse: StructuredGrid = build_grid(n_H)
        self.ratio = r = n_h // n_H
        self.ell = default_oversampling(n_H) if ell is None else int(ell)
        if self.ell < 0:
            raise ValueError("oversampling must be nonnegative")
        self.interpolation_constant = float(interpolation_constant)
        b, a = np.divmod(np.arange((r + 1) ** 2), r + 1)
        self.shape_ref = np.column_stack(_shape(a / r, b / r))      # (r+1)^2 x 4
        eb, ea = np.divmod(np.arange(r * r), r)
        v0 = eb * (r + 1) + ea
        self.local_conn = np.column_stack([v0, v0 + 1, v0 + r + 2, v0 + r + 1])
        ey, ex = np.divmod(np.arange(n_H * n_H), n_H)
        self.local_vertices = ((ey[:, None] * r + b[None, :]) * (n_h + 1) + ex[:, None] * r + a[None, :])
        self.local_elements = (ey[:, None] * r + eb[None, :]) * n_h + ex[:, None] * r + ea[None, :]
        self._fine_dof = self.fine.dof_map()
        self._coarse_dof = self.coarse.dof_map()
        self.prolongation_full = self._build_prolongation()
        self.prolongation = sp.csr_matrix(self.prolongation_full[self.fine.free][:, self.coarse.free])
        self.interpolation = self._build_interpolation()
        one = PiecewiseConstantField.constant()
        self.coarse_stiffness = assemble_component(self.coarse, one, "diffusion")
        self.coarse_mass = assemble_component(self.coarse, one, "l2")
        self.fine_stiffness = assemble_component(self.fine, one, "diffusion")
        self.fine_mass = assemble_component(self.fine, one, "l2")
        self.patches = [self._build_patch(t) for t in range(self.coarse.num_elements)]

    @property
    def c_ovl(self) -> int:
        return (2 * self.ell + 1) ** 2

    @property
    def num_coarse_elements(self) -> int:
        return self.coarse.num_elements

    def _build_prolongation(self) -> sp.csr_matrix:
        n_h, n_H, r = self.fine.n, self.coarse.n, self.ratio
        t = np.arange(n_h + 1) / r
        lo = np.minimum(np.floor(t).astype(int), n_H - 1)
        w = t - lo
        rows = np.concatenate([np.arange(n_h + 1)] * 2)
        cols = np.concatenate([lo, lo + 1])
        vals = np.concatenate([1 - w, w])
        keep = vals != 0.0
        P1 = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n_h + 1, n_H + 1))
        return sp.csr_matrix(sp.kron(P1, P1))

    def _build_interpolation(self) -> sp.csr_matrix:
        """Element-wise L2 projection onto Q1(T), then averaging at shared coarse vertices."""
        r = self.ratio
        ref_grid = StructuredGrid(r, ())
        M = assemble_component(ref_grid, PiecewiseConstantField.constant(), "l2").toarray()
        Phi = self.shape_ref
        proj = np.linalg.solve(Phi.T @ M @ Phi, Phi.T @ M)        # 4 x (r+1)^2
        conn = self.coarse.connectivity()
        share = np.bincount(conn.ravel(), minlength=self.coarse.num_vertices).astype(float)
        nT = self.coarse.num_elements
        rows = np.repeat(conn, proj.shape[1], axis=1)
        cols = np.tile(self.local_vertices, (1, 4))
        vals = np.tile(proj.ravel(), nT) / np.repeat(share[conn.ravel()], proj.shape[1])
        full = sp.coo_matrix((vals, (rows.ravel(), cols.ravel())),
                             shape=(self.coarse.num_vertices, self.fine.num_vertices)).tocsr()
        return sp.csr_matrix(full[self.coarse.free][:, self.fine.free])

    def _build_patch(self, t: int) -> Patch:
        n_H, r, ell = self.coarse.n, self.ratio, self.ell
        n_h = self.fine.n
        ey, ex = divmod(t, n_H)
        x0, x1 = max(0, ex - ell), min(n_H, ex + ell + 1)
        y0, y1 = max(0, ey - ell), min(n_H, ey + ell + 1)
        fx = np.arange(x0 * r, x1 * r + 1)
        fy = np.arange(y0 * r, y1 * r + 1)
        gy, gx = np.meshgrid(fy, fx, indexing="ij")
        verts = (gy * (n_h + 1) + gx).ravel()
        inside = ((gx > x0 * r) & (gx < x1 * r) & (gy > y0 * r) & (gy < y1 * r)).ravel()
        cl_verts = verts[self._fine_dof[verts] >= 0]
        closure = self._fine_dof[cl_verts]
        interior = self._fine_dof[verts[inside]]
        pos_in_closure = -np.ones(self.fine.num_dofs, dtype=np.int64)
        pos_in_closure[closure] = np.arange(closure.size)
        interior_pos = pos_in_closure[interior]
        cy, cx = np.meshgrid(np.arange(y0, y1 + 1), np.arange(x0, x1 + 1), indexing="ij")
        cverts = (cy * (n_H + 1) + cx).ravel()
        coarse_nodes = self._coarse_dof[cverts]
        coarse_nodes = np.sort(coarse_nodes[coarse_nodes >= 0])
        corners = self.coarse.connectivity()[t]
        cd = self._coarse_dof[corners]
        shape_corners = np.flatnonzero(cd >= 0)
        shape_dofs = cd[shape_corners]
        shape_rows = np.searchsorted(coarse_nodes, shape_dofs)
        pos_in_interior = -np.ones(self.fine.num_dofs, dtype=np.int64)
        pos_in_interior[interior] = np.arange(interior.size)
        ldofs = self._fine_dof[self.local_vertices[t]]
        local_to_interior = np.where(ldofs >= 0, pos_in_interior[np.maximum(ldofs, 0)], -1)
        local_to_closure = np.where(ldofs >= 0, pos_in_closure[np.maximum(ldofs, 0)], -1)
        ey_e, ex_e = np.meshgrid(np.arange(y0 * r, y1 * r), np.arange(x0 * r, x1 * r), indexing="ij")
        fine_elements = (ey_e * n_h + ex_e).ravel()
        constraint = sp.csr_matrix(self.interpolation[coarse_nodes][:, interior])
        prolong = sp.csr_matrix(self.prolongation[closure][:, coarse_nodes])
        return Patch(t, ell, (x0, x1, y0, y1), interior, closure, interior_pos, coarse_nodes,
                     shape_dofs, shape_corners, shape_rows, local_to_interior, local_to_closure,
                     fine_elements, constraint, prolong)

    def embed_interior(self, patch: Patch, values: np.ndarray) -> np.ndarray:
        out = np.zeros(self.fine.num_dofs if values.ndim == 1 else (self.fine.num_dofs, values.shape[1]))
        out[patch.interior] = values
        return out

    def fine_vertex_values(self, dofs: np.ndarray) -> np.ndarray:
        return self.fine.prolong(dofs)

    def exact_interpolation_constant(self) -> float:
        """Smallest C with |I_H v|_1 <= C |v|_1 on the fine space (dense, desk scale)."""
        IH = self.interpolation.toarray()
        A = IH.T @ (self.coarse_stiffness @ IH)
        lam = sla.eigh(A, self.fine_stiffness.toarray(), eigvals_only=True)
        return float(np.sqrt(max(lam.max(), 0.0)))


def build_coarse_pair(n_h: int, n_H: int, ell: int | None = None, interpolation_constant: float = 1.0):
    pair = CoarsePair(n_h, n_H, ell, interpolation_constant)
    return pair, pair.patches


@dataclass
class TwoScaleVector:
    """Coarse coefficients plus one fine-scale vector per coarse element (patch interior dofs)."""

    coarse: np.ndarray
    fine: list

    def __len__(self):
        return 1 + len(self.fine)

    def __add__(self, other):
        return TwoScaleVector(self.coarse + other.coarse, [a + b for a, b in zip(self.fine, other.fine)])

    def __sub__(self, other):
        return TwoScaleVector(self.coarse - other.coarse, [a - b for a, b in zip(self.fine, other.fine)])

    def __mul__(self, s: float):
        return TwoScaleVector(s * self.coarse, [s * a for a in self.fine])

    __rmul__ = __mul__


@dataclass
class TwoScaleConstants:
    alpha: float
    beta: float
    c_ovl: float
    interpolation_constant: float = 1.0
    gamma: float | None = None

    @property
    def kappa(self) -> float:
        return self.beta / self.alpha

    @property
    def rho(self) -> float:
        return self.c_ovl * self.kappa

    @property
    def gamma_kl(self) -> float:
        if self.gamma is not None:
            return self.gamma
        return math.sqrt(self.alpha) / self.interpolation_constant


def coefficient_bounds(fields, theta, points) -> tuple[float, float]:
    """Extremal cell values of A_mu = sum theta_xi(mu) A_xi over ``points`` or a box.

    A_mu is affine in mu, so over a box the extremes sit at corners and are found
    cell-wise without enumerating them.
    """
    res = int(np.lcm.reduce([f.resolution for f in fields]))
    vals = np.array([np.kron(f.values, np.ones((res // f.resolution,) * 2)).ravel() for f in fields])
    base = theta.offset @ vals
    slope = theta.coefficients.T @ vals                      # P x cells
    if isinstance(points, ParameterBox):
        lo, hi = points.lower[:, None], points.upper[:, None]
        amin = base + np.minimum(slope * lo, slope * hi).sum(axis=0)
        amax = base + np.maximum(slope * lo, slope * hi).sum(axis=0)
        return float(amin.min()), float(amax.max())
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    A = base[None, :] + pts @ slope
    return float(A.min()), float(A.max())


@dataclass
class CorrectorData:
    """Correctors of the shape functions of one element at one parameter."""

    correctors: np.ndarray          # interior x J_T
    block: np.ndarray               # coarse_nodes x J_T contribution to K
    solver: KernelSolver | None = None
    patch_matrix: sp.csr_matrix | None = None   # closure x interior, A_mu


@dataclass
class LodSolution:
    mu: np.ndarray
    u: np.ndarray
    stiffness: sp.csr_matrix
    correctors: list
    p: np.ndarray | None = None
    multiplier: np.ndarray | None = None
    value: float | None = None
    gradient: np.ndarray | None = None


class PgLod:
    """Parameterized PG-LOD: correctors, multiscale stiffness and coarse solves."""

    def __init__(self, pair: CoarsePair, operator: AffineForm, fields, rhs: AffineForm,
                 box: ParameterBox | None = None, counters: Counter | None = None, threads: int = 1):
        if len(fields) != len(operator.components):
            raise ValueError("one coefficient field per operator component is required")
        self.pair = pair
        self.operator = operator
        self.fields = list(fields)
        self.rhs = rhs
        self.box = box
        self.counters = Counter() if counters is None else counters
        self.threads = int(threads)
        fine = pair.fine
        self.element_stack = np.array([ElementMatrices(fine, f, "diffusion").local for f in fields]
                                      ).reshape(len(fields), fine.num_elements, 4, 4)
        self._shape_blocks = self._element_shape_blocks()
        self._stiffness_solvers: dict = {}
        self._coarse_lu = None

    @property
    def num_parameters(self) -> int:
        return self.operator.num_parameters

    @property
    def num_components(self) -> int:
        return len(self.fields)

    def _element_shape_blocks(self) -> np.ndarray:
        """a^T_xi(phi_k, .) at the fine vertices of each T: (Xi, n_T, (r+1)^2, 4)."""
        pair = self.pair
        conn = pair.local_conn
        Phi_e = pair.shape_ref[conn]                                   # r^2 x 4 x 4
        L = self.element_stack[:, pair.local_elements]                 # Xi x nT x r^2 x 4 x 4
        prod = L @ Phi_e[None, None]
        out = np.zeros(L.shape[:2] + (pair.shape_ref.shape[0], 4))
        for k in range(4):
            out[:, :, conn[:, k], :] += prod[:, :, :, k, :]
        return out

    def shape_rhs_components(self, patch: Patch) -> np.ndarray:
        """(Xi, n_interior, J_T): a^T_xi(phi_j, w) for interior test dofs w."""
        g = self._shape_blocks[:, patch.element][:, :, patch.shape_corners]
        sel = patch.local_to_interior >= 0
        out = np.zeros((g.shape[0], patch.num_interior, patch.num_shapes))
        out[:, patch.local_to_interior[sel], :] = g[:, sel, :]
        return out

    def element_stiffness_components(self, patch: Patch) -> np.ndarray:
        """(Xi, J_T, J_T): a^T_xi(phi_i, phi_j) on the shape functions of T."""
        g = self._shape_blocks[:, patch.element]
        k0 = np.einsum("vj,xvi->xji", self.pair.shape_ref, g)
        c = patch.shape_corners
        return k0[:, c][:, :, c]

    def patch_components(self, patch: Patch) -> list:
        """Affine components restricted to closure rows and interior columns."""
        return [sp.csr_matrix(A[patch.closure][:, patch.interior]) for A in self.operator.components]

    def stiffness_solver(self, patch: Patch) -> KernelSolver:
        """Kernel-constrained solver for the unit H1 product on a patch (cached)."""
        s = self._stiffness_solvers.get(patch.element)
        if s is None:
            S = self.pair.fine_stiffness[patch.interior][:, patch.interior]
            s = KernelSolver(S, patch.constraint)
            self._stiffness_solvers[patch.element] = s
        return s

    def coarse_riesz(self, r: np.ndarray) -> np.ndarray:
        if self._coarse_lu is None:
            self._coarse_lu = factorize(self.pair.coarse_stiffness)
        return self._coarse_lu.solve(r)

    def coarse_rhs(self, mu) -> np.ndarray:
        return self.pair.prolongation.T @ self.rhs.evaluate(mu)

    def corrector(self, patch: Patch, mu, keep: bool = False, A_mu=None) -> CorrectorData:
        theta = self.operator.theta(mu)
        A_mu = self.operator.evaluate(mu) if A_mu is None else A_mu
        A_cl = sp.csr_matrix(A_mu[patch.closure][:, patch.interior])
        A_int = A_cl[patch.interior_pos]
        solver = KernelSolver(A_int, patch.constraint)
        rhs = np.tensordot(theta, self.shape_rhs_components(patch), axes=1)
        Q = solver.solve(rhs)
        block = -(patch.prolongation.T @ (A_cl @ Q))
        k0 = np.tensordot(theta, self.element_stiffness_components(patch), axes=1)
        block[patch.shape_rows] += k0
        self.counters["lod_local"] += 1
        if keep:
            return CorrectorData(Q, block, solver, A_cl)
        return CorrectorData(Q, block)

    def correctors(self, mu, keep: bool = False) -> list:
        mu = np.asarray(mu, dtype=float)
        A_mu = self.operator.evaluate(mu)
        return map_elements(lambda p: self.corrector(p, mu, keep, A_mu), self.pair.patches, self.threads)

    def assemble_stiffness(self, corrections: list) -> sp.csr_matrix:
        """Sum of element contributions in element order (deterministic).

        Entries are CorrectorData or plain (coarse_nodes x J_T) blocks.
        """
        rows, cols, vals = [], [], []
        for patch, c in zip(self.pair.patches, corrections):
            rows.append(np.repeat(patch.coarse_nodes, patch.num_shapes))
            cols.append(np.tile(patch.shape_dofs, patch.coarse_nodes.size))
            vals.append(getattr(c, "block", c).ravel())
        n = self.pair.coarse.num_dofs
        if not rows:
            return sp.csr_matrix((n, n))
        return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n)).tocsr()

    def multiscale_matrix(self, mu):
        """(K_mu, per-element blocks)."""
        corr = self.correctors(mu)
        return self.assemble_stiffness(corr), [c.block for c in corr]

    def coarse_solve(self, K, rhs) -> np.ndarray:
        self.counters["lod_coarse"] += 1
        return factorize(K).solve(np.asarray(rhs, dtype=float))

    def solve(self, mu, keep: bool = False) -> LodSolution:
        mu = np.asarray(mu, dtype=float)
        corr = self.correctors(mu, keep)
        K = self.assemble_stiffness(corr)
        u = self.coarse_solve(K, self.coarse_rhs(mu))
        return LodSolution(mu, u, K, corr)

    # two-scale layer ------------------------------------------------------

    def two_scale_tuple(self, u_H: np.ndarray, correctors: list) -> TwoScaleVector:
        return TwoScaleVector(np.asarray(u_H, dtype=float),
                              [c.correctors @ u_H[p.shape_dofs] for p, c in zip(self.pair.patches, correctors)])

    def _fine_part(self, U: TwoScaleVector) -> np.ndarray:
        """P u_H - sum_T E_T u_T as a fine free-dof vector."""
        w = self.pair.prolongation @ U.coarse
        for p, uT in zip(self.pair.patches, U.fine):
            np.subtract.at(w, p.interior, uT)
        return w

    def two_scale_residual(self, mu, U: TwoScaleVector, rho: float, coarse_rhs=None):
        """Dual vectors of F - B_mu(U, .): coarse part and per-element interior parts."""
        A = self.operator.evaluate(mu)
        theta = self.operator.theta(mu)
        F = self.coarse_rhs(mu) if coarse_rhs is None else coarse_rhs
        r_H = F - self.pair.prolongation.T @ (A @ self._fine_part(U))
        s = math.sqrt(rho)
        parts = []
        for p, uT in zip(self.pair.patches, U.fine):
            G = np.tensordot(theta, self.shape_rhs_components(p), axes=1)
            A_int = A[p.interior][:, p.interior]
            parts.append(-s * (A_int @ uT - G @ U.coarse[p.shape_dofs]))
        return r_H, parts

    def two_scale_dual_norm(self, r_H, parts) -> float:
        """Dual norm w.r.t. |v_H|_1^2 + sum_T |v_T|_1^2 with v_T in the patch kernels."""
        total = float(r_H @ self.coarse_riesz(r_H))
        for p, R in zip(self.pair.patches, parts):
            if p.num_interior:
                total += float(R @ self.stiffness_solver(p).solve(R))
        return math.sqrt(max(total, 0.0))

    def two_scale_apply(self, mu, U: TwoScaleVector, V: TwoScaleVector, rho: float) -> float:
        A = self.operator.evaluate(mu)
        theta = self.operator.theta(mu)
        val = float((self.pair.prolongation @ V.coarse) @ (A @ self._fine_part(U)))
        s = math.sqrt(rho)
        for p, uT, vT in zip(self.pair.patches, U.fine, V.fine):
            G = np.tensordot(theta, self.shape_rhs_components(p), axes=1)
            A_int = A[p.interior][:, p.interior]
            val += s * float(vT @ (A_int @ uT) - vT @ (G @ U.coarse[p.shape_dofs]))
        return val

    def two_scale_rhs(self, mu, V: TwoScaleVector) -> float:
        return float(self.coarse_rhs(mu) @ V.coarse)

    def two_scale_norms(self, mu, U: TwoScaleVector, rho: float, correctors: list | None = None):
        """(|||U|||_A, |||U|||_1); correctors at mu are computed when not supplied."""
        A = self.operator.evaluate(mu)
        correctors = self.correctors(mu) if correctors is None else correctors
        w = self._fine_part(U)
        a2 = float(w @ (A @ w))
        s2 = float(U.coarse @ (self.pair.coarse_stiffness @ U.coarse))
        S = self.pair.fine_stiffness
        for p, c, uT in zip(self.pair.patches, correctors, U.fine):
            d = c.correctors @ U.coarse[p.shape_dofs] - uT
            a2 += rho * float(d @ (A[p.interior][:, p.interior] @ d))
            s2 += rho * float(d @ (S[p.interior][:, p.interior] @ d))
        return math.sqrt(max(a2, 0.0)), math.sqrt(max(s2, 0.0))

    def plain_norm(self, V: TwoScaleVector) -> float:
        """sqrt(|v_H|_1^2 + sum_T |v_T|_1^2)."""
        s2 = float(V.coarse @ (self.pair.coarse_stiffness @ V.coarse))
        S = self.pair.fine_stiffness
        for p, vT in zip(self.pair.patches, V.fine):
            s2 += float(vT @ (S[p.interior][:, p.interior] @ vT))
        return math.sqrt(max(s2, 0.0))

    def project_to_kernel(self, V: TwoScaleVector) -> TwoScaleVector:
        """Orthogonal (Euclidean) projection of every fine part onto ker I_H."""
        out = []
        for p, vT in zip(self.pair.patches, V.fine):
            C = p.constraint.toarray()
            if C.shape[0] and vT.size:
                vT = vT - C.T @ np.linalg.lstsq(C @ C.T, C @ vT, rcond=None)[0]
            out.append(vT)
        return TwoScaleVector(V.coarse.copy(), out)

    def random_two_scale(self, seed: int) -> TwoScaleVector:
        rng = np.random.default_rng(seed)
        V = TwoScaleVector(rng.standard_normal(self.pair.coarse.num_dofs),
                           [rng.standard_normal(p.num_interior) for p in self.pair.patches])
        return self.project_to_kernel(V)

    def two_scale_estimators(self, mu, U: TwoScaleVector, constants: TwoScaleConstants, coarse_rhs=None):
        """(eta_a, eta_1) from the exact dual norm of the two-scale residual."""
        r = self.two_scale_dual_norm(*self.two_scale_residual(mu, U, constants.rho, coarse_rhs))
        eta_a = math.sqrt(5.0) / constants.gamma_kl * r
        eta_1 = constants.interpolation_constant / math.sqrt(constants.alpha) * eta_a
        return eta_a, eta_1

    def constants(self, points=None, interpolation_constant: float | None = None,
                  gamma: float | None = None) -> TwoScaleConstants:
        points = self.box if points is None else points
        if points is None:
            raise ValueError("coefficient bounds need a box or a training set")
        alpha, beta = coefficient_bounds(self.fields, self.operator.theta, points)
        if alpha <= 0:
            raise ValueError("coefficient is not uniformly positive on the parameter set")
        ci = self.pair.interpolation_constant if interpolation_constant is None else interpolation_constant
        return TwoScaleConstants(alpha, beta, self.pair.c_ovl, ci, gamma)

    def exact_inf_sup(self, mu, correctors: list | None = None) -> float:
        """Discrete inf-sup constant of the LOD pair (dense, desk scale)."""
        correctors = self.correctors(mu) if correctors is None else correctors
        K = self.assemble_stiffness(correctors).toarray()
        W = self.pair.prolongation.toarray()
        for p, c in zip(self.pair.patches, correctors):
            W[np.ix_(p.interior, p.shape_dofs)] -= c.correctors
        A = self.operator.evaluate(mu)
        lhs = K.T @ np.linalg.solve(self.pair.coarse_stiffness.toarray(), K)
        rhs = W.T @ (A @ W)
        lam = sla.eigh(0.5 * (lhs + lhs.T), 0.5 * (rhs + rhs.T), eigvals_only=True)
        return float(np.sqrt(max(lam.min(), 0.0)))

    def two_scale_energy_error(self, mu, U: TwoScaleVector, rho: float) -> float:
        """|||u_mu - U|||_A with the exact two-scale solution (desk-scale oracle)."""
        sol = self.solve(mu)
        exact = self.two_scale_tuple(sol.u, sol.correctors)
        return self.two_scale_norms(mu, exact - U, rho, sol.correctors)[0]


class LodOptimization:
    """Objective J(u_H, mu) on top of a PG-LOD state equation, FOM interface for the TR driver."""

    def __init__(self, lod: PgLod, objective: QuadraticObjective, box: ParameterBox,
                 gradient_mode: str = "exact"):
        if gradient_mode not in ("exact", "coarse_formula"):
            raise ValueError("gradient_mode must be 'exact' or 'coarse_formula'")
        self.lod = lod
        self.objective = objective
        self.box = box
        self.gradient_mode = gradient_mode
        self.counters = lod.counters
        self._last = None

    @property
    def num_parameters(self) -> int:
        return self.lod.num_parameters

    @property
    def pair(self) -> CoarsePair:
        return self.lod.pair

    def solve(self, mu, dual: bool = True) -> LodSolution:
        """PG-LOD state (and duals when ``dual``); the last solution is cached."""
        mu = np.asarray(mu, dtype=float)
        sol = self._last
        if sol is None or not np.array_equal(sol.mu, mu):
            sol = self.lod.solve(mu, keep=self.gradient_mode == "exact")
            sol.value = self.objective.value(mu, sol.u)
            self._last = sol
        if dual and sol.p is None:
            dJ = self.objective.state_derivative(mu, sol.u)
            sol.p = factorize(sol.stiffness).solve(dJ)
            self.counters["lod_coarse"] += 1
            if self.gradient_mode == "exact":
                sol.multiplier = factorize(sol.stiffness.T).solve(dJ)
                self.counters["lod_coarse"] += 1
        return sol

    def value(self, mu) -> float:
        return self.solve(mu, dual=False).value

    def gradient(self, mu) -> np.ndarray:
        return self.value_and_gradient(mu).gradient

    def value_and_gradient(self, mu) -> LodSolution:
        sol = self.solve(mu, dual=True)
        if sol.gradient is None:
            sol.gradient = (self._exact_gradient(sol) if self.gradient_mode == "exact"
                            else self._coarse_formula_gradient(sol))
        return sol

    def _coarse_formula_gradient(self, sol: LodSolution) -> np.ndarray:
        P = self.pair.prolongation
        u, p = P @ sol.u, P @ sol.p
        op, rhs = self.lod.operator, self.lod.rhs
        return (self.objective.parameter_gradient(sol.mu, sol.u)
                + rhs.theta.coefficients.T @ form_scalars(rhs, p)
                - op.theta.coefficients.T @ form_scalars(op, u, p))

    def _exact_gradient(self, sol: LodSolution) -> np.ndarray:
        """Lagrangian gradient of mu -> J(u_H(mu), mu) including corrector sensitivities.

        With K^T lam = dJ/du and y_T the kernel-projected adjoint corrector of lam,
        lam^T (d_i K) u = sum_T a_i^T(u, lam - y_T) - a_i(Q_T u, lam - y_T).
        """
        lod, pair = self.lod, self.pair
        lam = sol.multiplier
        rhs = lod.rhs
        g = (self.objective.parameter_gradient(sol.mu, sol.u)
             + rhs.theta.coefficients.T @ form_scalars(rhs, pair.prolongation @ lam))
        lam_fine = pair.prolongation @ lam
        stack = lod.element_stack
        conn = pair.fine.connectivity()
        scal = np.zeros(lod.num_components)
        u_corner_all = pair.prolongation_full @ pair.coarse.prolong(sol.u)
        for p, c in zip(pair.patches, sol.correctors):
            lam_cl = lam_fine[p.closure]
            y = c.solver.solve(c.patch_matrix.T @ lam_cl)
            lod.counters["lod_local"] += 1
            w = np.zeros(pair.fine.num_vertices)
            w[pair.fine.free[p.closure]] = lam_cl
            w[pair.fine.free[p.interior]] -= y
            # a^T_xi(u, w) on the fine elements of T
            elems = pair.local_elements[p.element]
            ue = u_corner_all[conn[elems]]
            we = w[conn[elems]]
            scal += np.einsum("xeij,ej,ei->x", stack[:, elems], ue, we)
            # a_xi(Q_T u, w) on the fine elements of the patch
            q = np.zeros(pair.fine.num_vertices)
            q[pair.fine.free[p.interior]] = c.correctors @ sol.u[p.shape_dofs]
            pe = p.fine_elements
            scal -= np.einsum("xeij,ej,ei->x", stack[:, pe], q[conn[pe]], w[conn[pe]])
        return g - lod.operator.theta.coefficients.T @ scal

    def hessian_vec(self, mu, eta):
        raise NotImplementedError("second-order information is not available for the PG-LOD model")

    def two_scale_solution(self, mu) -> TwoScaleVector:
        sol = self.solve(mu, dual=False)
        return self.lod.two_scale_tuple(sol.u, sol.correctors)


def build_lod_problem(spec, counters: Counter | None = None, threads: int = 1,
                      gradient_mode: str = "exact") -> LodOptimization:
    """PG-LOD tracking problem; the target is the LOD coarse state at mu_d."""
    from .problems import diffusion_form, source_form
    from .fom_opt import tracking_objective
    pair = CoarsePair(spec.n_h, spec.n_H, spec.ell)
    operator, fields = diffusion_form(spec, pair.fine)
    rhs = source_form(spec, pair.fine)
    box = spec.box
    lod = PgLod(pair, operator, fields, rhs, box, counters, threads)
    mu_d = spec.point(spec.mu_d)
    target = lod.solve(mu_d).u
    lod.counters.clear()
    objective = tracking_objective(pair.coarse_mass, target, spec.sigma_d, spec.sigma_i, mu_d)
    return LodOptimization(lod, objective, box, gradient_mode)


def fem_reference_error(lod: PgLod, mu) -> float:
    """Relative L2 error between the LOD coarse part and the fine FEM solution."""
    A = lod.operator.evaluate(mu)
    u_h = factorize(A).solve(lod.rhs.evaluate(mu))
    u_H = lod.solve(mu).u
    d = u_h - lod.pair.prolongation @ u_H
    M = lod.pair.fine_mass
    return math.sqrt(float(d @ (M @ d)) / float(u_h @ (M @ u_h)))
