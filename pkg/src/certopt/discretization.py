"""Structured Q1 grids, piecewise-constant coefficients and affine operator assembly."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import kernels

# local vertex order: (0,0), (1,0), (1,1), (0,1) on the reference square
_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
_GAUSS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
SIDES = ("bottom", "right", "top", "left")


def _shape(x, y):
    return np.array([(1 - x) * (1 - y), x * (1 - y), x * y, (1 - x) * y])


def _shape_grad(x, y):
    return np.array([[-(1 - y), -(1 - x)],
                     [1 - y, -x],
                     [y, x],
                     [-y, 1 - x]])


def subcell_reference_matrices(r: int):
    """Reference Q1 stiffness, mass and load restricted to each of r x r sub-cells.

    Returned arrays have shapes (r*r, 16), (r*r, 16), (r*r, 4); sub-cell index is
    ``b * r + a`` for the sub-cell in column a, row b. Mass and load are for a
    unit element and scale with h**2; stiffness is scale-free in 2d.
    Two-point Gauss rules per sub-cell integrate all products exactly.
    """
    stiff = np.zeros((r * r, 16))
    mass = np.zeros((r * r, 16))
    load = np.zeros((r * r, 4))
    w = 0.25 / (r * r)
    for b in range(r):
        for a in range(r):
            s = b * r + a
            for gx in _GAUSS:
                for gy in _GAUSS:
                    x, y = (a + gx) / r, (b + gy) / r
                    phi = _shape(x, y)
                    dphi = _shape_grad(x, y)
                    stiff[s] += w * (dphi @ dphi.T).ravel()
                    mass[s] += w * np.outer(phi, phi).ravel()
                    load[s] += w * phi
    return stiff, mass, load


@dataclass(frozen=True)
class StructuredGrid:
    """Uniform quadrilateral grid of the unit square with n cells per axis."""

    n: int
    dirichlet_sides: tuple = SIDES

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("grid needs at least one cell per axis")
        for s in self.dirichlet_sides:
            if s not in SIDES:
                raise ValueError(f"unknown boundary side {s!r}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def num_vertices(self) -> int:
        return (self.n + 1) ** 2

    @property
    def num_elements(self) -> int:
        return self.n * self.n

    def vertex_coordinates(self) -> np.ndarray:
        t = np.linspace(0.0, 1.0, self.n + 1)
        xx, yy = np.meshgrid(t, t)
        return np.column_stack([xx.ravel(), yy.ravel()])

    def connectivity(self) -> np.ndarray:
        n = self.n
        iy, ix = np.divmod(np.arange(n * n), n)
        v0 = iy * (n + 1) + ix
        return np.column_stack([v0, v0 + 1, v0 + n + 2, v0 + n + 1])

    def side_mask(self, sides) -> np.ndarray:
        n = self.n
        iy, ix = np.divmod(np.arange(self.num_vertices), n + 1)
        mask = np.zeros(self.num_vertices, dtype=bool)
        for s in sides:
            mask |= {"bottom": iy == 0, "top": iy == n, "left": ix == 0, "right": ix == n}[s]
        return mask

    @property
    def dirichlet_mask(self) -> np.ndarray:
        return self.side_mask(self.dirichlet_sides)

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet_mask)

    @property
    def num_dofs(self) -> int:
        return self.free.size

    def dof_map(self) -> np.ndarray:
        """Vertex to dof index, -1 on Dirichlet vertices."""
        m = -np.ones(self.num_vertices, dtype=np.int64)
        m[self.free] = np.arange(self.num_dofs)
        return m

    def prolong(self, dofs: np.ndarray) -> np.ndarray:
        """Extend a dof vector by zeros on Dirichlet vertices."""
        out = np.zeros(self.num_vertices)
        out[self.free] = dofs
        return out


def build_grid(n: int, dirichlet_sides=SIDES) -> StructuredGrid:
    return StructuredGrid(int(n), tuple(dirichlet_sides))


@dataclass(frozen=True)
class PiecewiseConstantField:
    """Coefficient constant on each cell of a uniform N x N partition; values[row_y, col_x]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("field values must be a square 2d array")
        object.__setattr__(self, "values", v)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @staticmethod
    def constant(value: float = 1.0, resolution: int = 1) -> "PiecewiseConstantField":
        return PiecewiseConstantField(np.full((resolution, resolution), float(value)))

    def element_values(self, grid: StructuredGrid) -> np.ndarray:
        """Sub-cell values per element, shape (num_elements, r*r)."""
        N, n = self.resolution, grid.n
        iy, ix = np.divmod(np.arange(n * n), n)
        if N <= n:
            if n % N:
                raise ValueError(f"field resolution {N} incompatible with grid {n}")
            c = n // N
            return self.values[iy // c, ix // c][:, None]
        if N % n:
            raise ValueError(f"field resolution {N} incompatible with grid {n}")
        r = N // n
        b, a = np.divmod(np.arange(r * r), r)
        return self.values[iy[:, None] * r + b[None, :], ix[:, None] * r + a[None, :]]


class ElementMatrices:
    """Per-element local Q1 data of one coefficient field on one grid."""

    def __init__(self, grid: StructuredGrid, field: PiecewiseConstantField, kind: str = "diffusion"):
        vals = field.element_values(grid)
        r = int(round(np.sqrt(vals.shape[1])))
        stiff, mass, load = subcell_reference_matrices(r)
        if kind == "diffusion":
            self.local = vals @ stiff
        elif kind == "l2":
            self.local = (vals @ mass) * grid.h ** 2
        elif kind == "rhs":
            self.local = (vals @ load) * grid.h ** 2
        else:
            raise ValueError(f"unknown component kind {kind!r}")
        self.kind = kind


class Q1Assembler:
    """Fixed sparsity pattern for assembling local Q1 data restricted to free dofs.

    ``elements`` optionally restricts assembly to a subset of the grid's elements and
    ``dof_map`` overrides the vertex-to-dof numbering (entries < 0 are eliminated).
    """

    def __init__(self, grid: StructuredGrid, elements: np.ndarray | None = None,
                 dof_map: np.ndarray | None = None):
        conn = grid.connectivity()
        if elements is not None:
            conn = conn[elements]
        self.elements = elements
        dmap = grid.dof_map() if dof_map is None else np.asarray(dof_map)
        self.size = int(dmap.max()) + 1 if dmap.size and dmap.max() >= 0 else 0
        ldofs = dmap[conn]
        self.element_dofs = ldofs
        rows = np.repeat(ldofs, 4, axis=1)
        cols = np.tile(ldofs, (1, 4))
        valid = (rows >= 0) & (cols >= 0)
        keys = np.where(valid, rows * max(self.size, 1) + cols, -1)
        uniq, inv = np.unique(keys[valid], return_inverse=True)
        pos = -np.ones(keys.shape, dtype=np.int64)
        pos[valid] = inv
        self._positions = np.ascontiguousarray(pos)
        urows, ucols = np.divmod(uniq, max(self.size, 1))
        self._indices = ucols.astype(np.int32)
        self._indptr = np.searchsorted(urows, np.arange(self.size + 1)).astype(np.int32)
        self._nnz = uniq.size
        vpos = np.where(ldofs >= 0, ldofs, -1).astype(np.int64)
        self._vector_positions = np.ascontiguousarray(vpos)

    def matrix(self, local: np.ndarray) -> sp.csr_matrix:
        local = np.ascontiguousarray(local.reshape(-1, 16), dtype=float)
        if self.elements is not None and local.shape[0] != self._positions.shape[0]:
            local = np.ascontiguousarray(local[self.elements])
        data = kernels.scatter_add(self._positions, local, self._nnz)
        return sp.csr_matrix((data, self._indices.copy(), self._indptr.copy()),
                             shape=(self.size, self.size))

    def vector(self, local: np.ndarray) -> np.ndarray:
        local = np.ascontiguousarray(local.reshape(-1, 4), dtype=float)
        if self.elements is not None and local.shape[0] != self._vector_positions.shape[0]:
            local = np.ascontiguousarray(local[self.elements])
        return kernels.scatter_add(self._vector_positions, local, self.size)


def assemble_component(grid: StructuredGrid, field: PiecewiseConstantField, kind: str = "diffusion"):
    """Assemble a diffusion or mass matrix, or a load vector, on the free dofs."""
    em = ElementMatrices(grid, field, kind)
    asm = Q1Assembler(grid)
    return asm.vector(em.local) if kind == "rhs" else asm.matrix(em.local)


def assemble_boundary_mass(grid: StructuredGrid, sides: Sequence[str]) -> sp.csr_matrix:
    """Edge mass matrix on the given (non-Dirichlet) sides, for Robin terms."""
    n, h = grid.n, grid.h
    dmap = grid.dof_map()
    rows, cols, vals = [], [], []
    edge = np.array([[2.0, 1.0], [1.0, 2.0]]) * h / 6.0
    for s in sides:
        idx = np.arange(n)
        if s == "bottom":
            a, b = idx, idx + 1
        elif s == "top":
            a, b = n * (n + 1) + idx, n * (n + 1) + idx + 1
        elif s == "left":
            a, b = idx * (n + 1), (idx + 1) * (n + 1)
        elif s == "right":
            a, b = idx * (n + 1) + n, (idx + 1) * (n + 1) + n
        else:
            raise ValueError(f"unknown boundary side {s!r}")
        for i, vi in enumerate((a, b)):
            for j, vj in enumerate((a, b)):
                rows.append(dmap[vi])
                cols.append(dmap[vj])
                vals.append(np.full(n, edge[i, j]))
    r, c, v = (np.concatenate(x) for x in (rows, cols, vals))
    keep = (r >= 0) & (c >= 0)
    return sp.csr_matrix((v[keep], (r[keep], c[keep])), shape=(grid.num_dofs,) * 2)


@dataclass
class AffineTheta:
    """Affine-linear coefficient functionals theta(mu) = offset + coefficients @ mu."""

    offset: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        self.offset = np.atleast_1d(np.asarray(self.offset, dtype=float))
        self.coefficients = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        if self.coefficients.shape[0] != self.offset.size:
            raise ValueError("theta offset and coefficient rows differ")

    @property
    def num_terms(self) -> int:
        return self.offset.size

    @property
    def num_parameters(self) -> int:
        return self.coefficients.shape[1]

    def __call__(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.num_parameters,):
            raise ValueError(f"expected parameter of length {self.num_parameters}, got {mu.shape}")
        return self.offset + self.coefficients @ mu

    def derivative(self, i: int) -> np.ndarray:
        return self.coefficients[:, i]

    def directional(self, eta) -> np.ndarray:
        return self.coefficients @ np.asarray(eta, dtype=float)

    @staticmethod
    def identity(num_parameters: int, num_terms: int | None = None) -> "AffineTheta":
        """theta_xi(mu) = mu_xi for xi < num_terms."""
        k = num_parameters if num_terms is None else num_terms
        return AffineTheta(np.zeros(k), np.eye(k, num_parameters))

    @staticmethod
    def constant(num_parameters: int, values=(1.0,)) -> "AffineTheta":
        v = np.atleast_1d(np.asarray(values, dtype=float))
        return AffineTheta(v, np.zeros((v.size, num_parameters)))


@dataclass
class AffineForm:
    """Parameter-separable operator or functional sum_xi theta_xi(mu) * component_xi."""

    components: list
    theta: AffineTheta
    arity: str = field(default="bilinear")

    def __post_init__(self):
        if len(self.components) != self.theta.num_terms:
            raise ValueError("number of components and theta terms differ")
        if self.arity not in ("bilinear", "linear"):
            raise ValueError("arity must be 'bilinear' or 'linear'")

    @property
    def num_parameters(self) -> int:
        return self.theta.num_parameters

    def _combine(self, weights):
        comps = self.components
        if self.arity == "linear":
            return np.asarray(sum(w * c for w, c in zip(weights, comps)), dtype=float)
        out = None
        for w, c in zip(weights, comps):
            if w == 0.0:
                continue
            out = w * c if out is None else out + w * c
        if out is None:
            out = 0.0 * comps[0]
        return out.tocsr() if sp.issparse(out) else out

    def evaluate(self, mu):
        return self._combine(self.theta(mu))

    def derivative(self, i: int):
        return self._combine(self.theta.derivative(i))

    def directional(self, eta):
        return self._combine(self.theta.directional(eta))

    def is_parametric(self) -> bool:
        return bool(np.any(self.theta.coefficients != 0.0))

    def project(self, left: np.ndarray, right: np.ndarray | None = None) -> "ProjectedForm":
        """Galerkin-project every component; test basis ``left``, trial basis ``right``."""
        if self.arity == "linear":
            return ProjectedForm([left.T @ c for c in self.components], self.theta)
        right = left if right is None else right
        return ProjectedForm([left.T @ (c @ right) for c in self.components], self.theta)


@dataclass
class ProjectedForm:
    """Dense reduced counterpart of an AffineForm."""

    components: list
    theta: AffineTheta

    def __post_init__(self):
        self._stack = np.ascontiguousarray(np.array(self.components, dtype=float))

    def _combine(self, weights):
        if self._stack.ndim == 2:
            return np.asarray(weights, dtype=float) @ self._stack
        return kernels.combine_rows(np.ascontiguousarray(weights, dtype=float), self._stack)

    def evaluate(self, mu):
        return self._combine(self.theta(mu))

    def derivative(self, i):
        return self._combine(self.theta.derivative(i))

    def directional(self, eta):
        return self._combine(self.theta.directional(eta))


def evaluate_affine(form: AffineForm, mu):
    return form.evaluate(mu)


@dataclass(frozen=True)
class ParameterBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box bounds must have equal shape and lower <= upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def project(self, mu) -> np.ndarray:
        return project_to_box(mu, self)

    def contains(self, mu, tol: float = 0.0) -> bool:
        mu = np.asarray(mu, dtype=float)
        return bool(np.all(mu >= self.lower - tol) and np.all(mu <= self.upper + tol))

    def sample(self, count: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return self.lower + rng.random((count, self.dim)) * (self.upper - self.lower)

    def corners(self) -> np.ndarray:
        grids = np.meshgrid(*[[a, b] for a, b in zip(self.lower, self.upper)], indexing="ij")
        return np.column_stack([g.ravel() for g in grids])


def project_to_box(mu, box: ParameterBox) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if mu.shape != box.lower.shape:
        raise ValueError("parameter and box dimensions differ")
    return np.minimum(np.maximum(mu, box.lower), box.upper)


@dataclass
class ProductMatrices:
    energy: sp.csr_matrix
    h1: sp.csr_matrix
    l2: sp.csr_matrix
    mu_check: np.ndarray


def build_products(grid: StructuredGrid, stiffness: AffineForm, mu_check) -> ProductMatrices:
    one = PiecewiseConstantField.constant()
    return ProductMatrices(stiffness.evaluate(mu_check),
                           assemble_component(grid, one, "diffusion"),
                           assemble_component(grid, one, "l2"),
                           np.asarray(mu_check, dtype=float))


def theta_ratios(form: AffineForm | AffineTheta, mu_check, mu) -> np.ndarray:
    theta = form.theta if isinstance(form, AffineForm) else form
    ref = theta(mu_check)
    if np.any(ref == 0.0):
        raise ValueError("min-theta bound needs theta(mu_check) != 0 for every term")
    ratio = theta(mu) / ref
    if np.any(ratio <= 0.0):
        raise ValueError("min-theta bound needs sign-consistent theta")
    return ratio


def stability_constants(form: AffineForm, mu_check, mu, alpha_check: float = 1.0,
                        gamma_check: float = 1.0) -> tuple[float, float]:
    """Min-theta coercivity lower bound and max-theta continuity upper bound.

    Constants are relative to the energy product a_{mu_check}; components must be
    positive semi-definite for the bounds to hold.
    """
    ratio = theta_ratios(form, mu_check, mu)
    return alpha_check * float(ratio.min()), gamma_check * float(ratio.max())


def random_block_values(seed: int, block_index: int, count: int, law: str = "uniform",
                        low: float = 0.9, high: float = 1.1) -> np.ndarray:
    """Reproducible cell values drawn by a counter-based generator keyed by (seed, block)."""
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, block_index], dtype=np.uint64)))
    if law == "uniform":
        return gen.uniform(low, high, size=count)
    if law == "normal":
        mean, std = 0.5 * (low + high), 0.25 * (high - low)
        return np.clip(gen.normal(mean, std, size=count), 1e-3 * max(abs(mean), 1.0), None)
    if law == "constant":
        return np.full(count, 0.5 * (low + high))
    raise ValueError(f"unknown random law {law!r}")


def block_cell_masks(resolution: int, blocks: tuple[int, int]) -> list[np.ndarray]:
    """Boolean masks of data cells for each block, block index = by * px + bx."""
    px, py = blocks
    if resolution % px or resolution % py:
        raise ValueError("field resolution must be divisible by the block counts")
    iy, ix = np.divmod(np.arange(resolution * resolution), resolution)
    bx, by = ix // (resolution // px), iy // (resolution // py)
    return [((by * px + bx) == b).reshape(resolution, resolution) for b in range(px * py)]


def block_fields(resolution: int, blocks: tuple[int, int], seed: int | None, field_index: int = 0,
                 law: str = "uniform", low: float = 0.9, high: float = 1.1) -> list[PiecewiseConstantField]:
    """One field per block, supported on the block; random values if seed is given."""
    masks = block_cell_masks(resolution, blocks)
    out = []
    for b, m in enumerate(masks):
        vals = np.zeros((resolution, resolution))
        if seed is None:
            vals[m] = 1.0
        else:
            global_index = field_index * len(masks) + b
            vals[m] = random_block_values(seed, global_index, int(m.sum()), law, low, high)
        out.append(PiecewiseConstantField(vals))
    return out


def build_thermal_block(grid: StructuredGrid, blocks: tuple[int, int] = (2, 2), fields: int = 1,
                        resolution: int | None = None, seed: int | None = None, law: str = "uniform",
                        ranges: Sequence[tuple[float, float]] | None = None,
                        num_parameters: int | None = None):
    """Thermal-block diffusion form with theta_xi(mu) = mu_xi.

    Component xi = f * (px*py) + b is field f restricted to block b. Returns the
    AffineForm and the per-component coefficient fields.
    """
    px, py = blocks
    nb = px * py
    xi = fields * nb
    P = xi if num_parameters is None else num_parameters
    if P < xi:
        raise ValueError(f"thermal block needs {xi} parameters, got {P}")
    res = resolution if resolution is not None else max(px, py)
    ranges = ranges or [(0.9, 1.1)] * fields
    comps, fld = [], []
    for f in range(fields):
        lo, hi = ranges[f]
        for pcf in block_fields(res, blocks, seed, f, law, lo, hi):
            fld.append(pcf)
            comps.append(assemble_component(grid, pcf, "diffusion"))
    return AffineForm(comps, AffineTheta.identity(P, xi), "bilinear"), fld


def write_matrix_market(path, matrix) -> None:
    import scipy.io
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), precision=17)
