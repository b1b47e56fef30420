"""Benchmark problem definitions shared by the drivers and the command line."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .discretization import (AffineForm, AffineTheta, ParameterBox, PiecewiseConstantField,
                             assemble_component, build_grid, build_thermal_block)
from .fom_opt import FomSystem, tracking_objective


@dataclass
class ProblemSpec:
    name: str = "custom"
    n_h: int = 64
    n_H: int = 8
    ell: int = 2
    blocks: tuple = (2, 2)
    fields: int = 1
    resolution: int | None = None
    seed: int | None = None
    law: str = "uniform"
    field_ranges: list = field(default_factory=lambda: [[0.9, 1.1]])
    lower: list = field(default_factory=lambda: [1.0])
    upper: list = field(default_factory=lambda: [4.0])
    sigma_d: float = 100.0
    sigma_i: float = 1e-3
    source: float = 10.0
    mu_d: object = "fraction:0.35"
    mu_0: object = "fraction:0.75"

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        P = self.num_parameters
        if len(self.lower) == 1:
            self.lower = list(self.lower) * P
        if len(self.upper) == 1:
            self.upper = list(self.upper) * P
        if len(self.lower) != P or len(self.upper) != P:
            raise ValueError(f"box bounds must have length {P}")
        if len(self.field_ranges) != self.fields:
            raise ValueError("field_ranges needs one [low, high] pair per field")

    @property
    def num_parameters(self) -> int:
        return self.blocks[0] * self.blocks[1] * self.fields

    @property
    def box(self) -> ParameterBox:
        return ParameterBox(np.asarray(self.lower, float), np.asarray(self.upper, float))

    def point(self, rule) -> np.ndarray:
        """Resolve a parameter rule: list, 'center', 'fraction:t' or 'random:seed'."""
        box = self.box
        if isinstance(rule, (list, tuple, np.ndarray)):
            mu = np.asarray(rule, dtype=float)
            if mu.shape != (box.dim,):
                raise ValueError(f"parameter must have length {box.dim}")
            return mu
        kind, _, arg = str(rule).partition(":")
        if kind == "center":
            return box.center
        if kind == "fraction":
            return box.lower + float(arg) * (box.upper - box.lower)
        if kind == "random":
            return box.sample(1, int(arg))[0]
        raise ValueError(f"unknown parameter rule {rule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        return d


BENCHMARKS = {
    # two blocks stacked vertically, smooth coefficient
    "B1": dict(name="B1", n_h=48, blocks=(1, 2), fields=1, seed=None, field_ranges=[[1.0, 1.0]],
               lower=[0.5], upper=[5.0], mu_d=[1.4, 3.2], mu_0=[4.5, 0.6]),
    # 2x2 blocks, two random multiscale fields
    "B2": dict(name="B2", n_h=64, n_H=8, blocks=(2, 2), fields=2, resolution=64, seed=11,
               field_ranges=[[0.1, 1.0], [0.5, 1.5]], lower=[1.0] * 4 + [1.0] * 4,
               upper=[4.0] * 4 + [1.2] * 4),
    # 4x4 blocks, two random multiscale fields; configuration only
    "B3": dict(name="B3", n_h=256, n_H=16, blocks=(4, 4), fields=2, resolution=256, seed=11,
               field_ranges=[[0.1, 1.0], [0.5, 1.5]], lower=[1.0] * 32,
               upper=[4.0] * 24 + [1.2] * 8),
}


def benchmark_spec(name: str, **overrides) -> ProblemSpec:
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; known: {sorted(BENCHMARKS)}")
    cfg = dict(BENCHMARKS[name])
    cfg.update(overrides)
    return ProblemSpec(**cfg)


def diffusion_form(spec: ProblemSpec, grid):
    res = spec.resolution if spec.resolution is not None else max(spec.blocks)
    form, fields = build_thermal_block(grid, spec.blocks, spec.fields, res, spec.seed, spec.law,
                                       [tuple(r) for r in spec.field_ranges])
    return form, fields


def source_form(spec: ProblemSpec, grid) -> AffineForm:
    vec = assemble_component(grid, PiecewiseConstantField.constant(spec.source), "rhs")
    return AffineForm([vec], AffineTheta.constant(spec.num_parameters), "linear")


def build_fem_problem(spec: ProblemSpec, counters=None) -> FomSystem:
    """FEM tracking problem with target state computed at mu_d."""
    grid = build_grid(spec.n_h)
    operator, _ = diffusion_form(spec, grid)
    rhs = source_form(spec, grid)
    mass = assemble_component(grid, PiecewiseConstantField.constant(), "l2")
    box = spec.box
    mu_d = spec.point(spec.mu_d)
    zero = np.zeros(grid.num_dofs)
    kw = {} if counters is None else {"counters": counters}
    probe = FomSystem(operator, rhs, tracking_objective(mass, zero, spec.sigma_d, spec.sigma_i, mu_d),
                      box, box.center, **kw)
    target = probe.solve_primal(mu_d)
    probe.counters.clear()
    fom = FomSystem(operator, rhs, tracking_objective(mass, target, spec.sigma_d, spec.sigma_i, mu_d),
                    box, box.center, **kw)
    fom.grid = grid
    return fom
