"""Experiment configuration, method drivers and result files."""
from __future__ import annotations

import copy
import csv
import json
import time
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path

import jsonschema
import numpy as np

from .problems import BENCHMARKS, ProblemSpec, benchmark_spec
from .trust_region import TrParams

SCHEMA_VERSION = 1

METHODS = ("fem_bfgs", "tr_rb", "r_tr_rb", "pglod_bfgs", "tr_rblod", "tr_tsrblod",
           "r_tr_rblod", "r_tr_tsrblod")

_NUMBER = {"type": "number"}
_PROBLEM_KEYS = {
    "benchmark": {"type": "string", "enum": sorted(BENCHMARKS)},
    "name": {"type": "string"},
    "n_h": {"type": "integer", "minimum": 2},
    "n_H": {"type": "integer", "minimum": 1},
    "ell": {"type": "integer", "minimum": 1},
    "blocks": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
    "fields": {"type": "integer", "minimum": 1},
    "resolution": {"type": ["integer", "null"], "minimum": 1},
    "seed": {"type": ["integer", "null"]},
    "law": {"type": "string", "enum": ["uniform", "normal", "constant"]},
    "field_ranges": {"type": "array", "items": {"type": "array", "items": _NUMBER,
                                                 "minItems": 2, "maxItems": 2}},
    "lower": {"type": "array", "items": _NUMBER},
    "upper": {"type": "array", "items": _NUMBER},
    "sigma_d": _NUMBER,
    "sigma_i": _NUMBER,
    "source": _NUMBER,
    "mu_d": {"type": ["string", "array"]},
    "mu_0": {"type": ["string", "array"]},
}
_TR_KEYS = {f.name: ({"type": "boolean"} if f.type in ("bool", bool) else
                     {"type": "string"} if f.type in ("str", str) else
                     {"type": ["number", "null"]})
            for f in fields(TrParams)}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "problem": {"type": "object", "additionalProperties": False, "properties": _PROBLEM_KEYS},
        "method": {"type": "string", "enum": list(METHODS)},
        "methods": {"type": "array", "items": {"type": "string", "enum": list(METHODS)}},
        "tr": {"type": "object", "additionalProperties": False, "properties": _TR_KEYS},
        "tolerances": {
            "type": "object", "additionalProperties": False,
            "properties": {k: {"type": ["number", "null"]}
                           for k in ("eps1", "eps2", "tau_loc", "tau_foc", "tau_sub", "tau_mu")},
        },
        "greedy": {
            "type": "object", "additionalProperties": False,
            "properties": {"training_size": {"type": "integer", "minimum": 1},
                           "max_size": {"type": "integer", "minimum": 1},
                           "quantity": {"type": "string"}},
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "matrix_market": {"type": "boolean"}},
        },
        "seed": {"type": "integer"},
        "threads": {"type": "integer", "minimum": 1},
    },
}

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "problem": {"benchmark": "B1"},
    "method": "tr_rb",
    "methods": [],
    "tr": {},
    "tolerances": {"eps1": 1e-3, "eps2": 1e-2, "tau_loc": 1e-3, "tau_foc": 1e-6, "tau_sub": 1e-8,
                   "tau_mu": None},
    "greedy": {"training_size": 20, "max_size": 5, "quantity": "primal"},
    "output": {"dir": "results", "matrix_market": False},
    "seed": 0,
    "threads": 1,
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    data: dict

    @property
    def method(self) -> str:
        return self.data["method"]

    @property
    def tolerances(self) -> dict:
        return self.data["tolerances"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def threads(self) -> int:
        return self.data["threads"]

    @property
    def out_dir(self) -> Path:
        return Path(self.data["output"]["dir"])

    def problem(self) -> ProblemSpec:
        p = dict(self.data["problem"])
        name = p.pop("benchmark", None)
        return benchmark_spec(name, **p) if name else ProblemSpec(**p)

    def tr_params(self, relaxed: bool = False) -> TrParams:
        kw = {k: v for k, v in self.data["tr"].items()}
        tol = self.tolerances
        kw.setdefault("tau_foc", tol["tau_foc"])
        kw.setdefault("tau_sub", tol["tau_sub"])
        kw.setdefault("tau_mu", tol["tau_mu"])
        if relaxed:
            kw["relaxed"] = True
        return TrParams(**kw)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        d = copy.deepcopy(self.data)
        for k, v in kw.items():
            if v is None:
                continue
            if k == "out":
                d["output"]["dir"] = str(v)
            else:
                d[k] = v
        return validate_config(d)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)


def _error_path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate_config(raw: dict) -> ExperimentConfig:
    """Schema check, then defaults for every missing section entry."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = [f"{_error_path(e)}: {e.message}" for e in errors]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(msgs))
    data = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if isinstance(value, dict) and key in ("tolerances", "greedy", "output"):
            data[key].update(value)
        else:
            data[key] = copy.deepcopy(value)
    return ExperimentConfig(data)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file {path} does not exist")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return validate_config(raw)


def serialize_config(config: ExperimentConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# drivers


@dataclass
class RunReport:
    method: str
    mu: np.ndarray
    value: float
    foc: float
    outer_iterations: int
    inner_iterations: int
    counters: dict
    wall_time: float
    relative_error: float
    reason: str
    converged: bool
    basis_sizes: tuple = ()
    history: list = field(default_factory=list)
    log_path: str | None = None

    def summary(self) -> dict:
        return {"method": self.method, "mu": [float(x) for x in self.mu], "value": float(self.value),
                "foc": float(self.foc), "outer_iterations": int(self.outer_iterations),
                "inner_iterations": int(self.inner_iterations),
                "counters": {k: int(v) for k, v in sorted(self.counters.items())},
                "wall_time": self.wall_time, "relative_error": float(self.relative_error),
                "reason": self.reason, "converged": bool(self.converged),
                "basis_sizes": [int(b) for b in self.basis_sizes], "log_path": self.log_path}


COUNTER_CATEGORIES = ("fom_evaluations", "fem", "rb", "lod_local", "lod_coarse", "rblod_local",
                      "rblod_coarse", "tsrblod", "estimator_assembly", "local_enrichments",
                      "local_skips", "rejections")


def _fem(spec, counters):
    from .problems import build_fem_problem
    return build_fem_problem(spec, counters)


def _lod(spec, counters, threads):
    from .lod_two_scale import build_lod_problem
    return build_lod_problem(spec, counters, threads)


def _full_order(method: str, spec, counters, threads):
    if method in ("fem_bfgs", "tr_rb", "r_tr_rb"):
        return _fem(spec, counters)
    return _lod(spec, counters, threads)


def run_method(config: ExperimentConfig, method: str | None = None) -> RunReport:
    """Run one optimization method on the configured problem."""
    from .trust_region import projected_bfgs, run_tr, RbModel
    from .rb_localized import LocalizedCertifiedModel
    method = method or config.method
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; known: {', '.join(METHODS)}")
    spec = config.problem()
    counters = Counter()
    try:
        fom = _full_order(method, spec, counters, config.threads)
    except Exception as exc:
        raise RuntimeError(f"{method}: building the full-order model failed: {exc}") from exc
    box = spec.box
    mu0 = spec.point(spec.mu_0)
    tol = config.tolerances
    t0 = time.perf_counter()
    try:
        if method in ("fem_bfgs", "pglod_bfgs"):
            res = projected_bfgs(fom, box, mu0, tol["tau_foc"], params=config.tr_params())
            mu, value, foc = res.mu, fom.value(res.mu), res.foc
            outer, inner, reason, history, sizes = res.iterations, res.iterations, res.reason, [], ()
            converged = res.reason == "foc"
        else:
            relaxed = method.startswith("r_")
            params = config.tr_params(relaxed)
            if method.endswith("tr_rb"):
                model = RbModel(fom, "ncd")
            else:
                variant = "tsrblod" if method.endswith("tsrblod") else "rblod"
                model = LocalizedCertifiedModel(fom, variant, tol["tau_loc"])
            state = run_tr(model, box, mu0, params)
            counters.update(state.counters)
            mu, value, foc = state.mu, state.fom_value, state.foc
            outer, inner, reason = state.k, state.inner_iterations, state.reason
            history, sizes, converged = state.history, model.basis_sizes(), state.converged
    except Exception as exc:
        raise RuntimeError(f"{method}: optimization failed: {exc}") from exc
    wall = time.perf_counter() - t0
    snapshot = Counter(counters)
    J_d = fom.value(spec.point(spec.mu_d))
    for k in COUNTER_CATEGORIES:
        snapshot.setdefault(k, 0)
    return RunReport(method, np.asarray(mu, dtype=float), float(value), float(foc), outer, inner,
                     dict(snapshot), wall, abs(J_d - value) / abs(J_d), reason, converged,
                     tuple(sizes), history)


# ---------------------------------------------------------------------------
# outputs


def fmt(x) -> str:
    return format(float(x), ".17g")


ITERATION_COLUMNS = ("k", "decision", "J_h", "g_h", "delta", "J_r", "q", "basis_sizes")


def write_iterations(path, history: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    P = len(history[0]["mu"]) if history else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(ITERATION_COLUMNS) + [f"mu_{i}" for i in range(P)])
        for h in history:
            row = [h["k"], h.get("decision", ""), fmt(h["J_h"]), fmt(h["g_h"]), fmt(h["delta"]),
                   fmt(h.get("J_r", float("nan"))), fmt(h.get("q", float("nan"))),
                   "|".join(str(int(b)) for b in h["basis_sizes"])]
            w.writerow(row + [fmt(m) for m in h["mu"]])


def write_outputs(report: RunReport, out_dir, prefix: str | None = None) -> dict:
    """Per-iteration CSV and JSON summary; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = prefix or report.method
    log = out_dir / f"{prefix}_iterations.csv"
    write_iterations(log, report.history)
    report.log_path = str(log)
    summary = out_dir / f"{prefix}_summary.json"
    with open(summary, "w") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"iterations": log, "summary": summary}


def write_table(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x) if isinstance(x, (float, np.floating)) else x for x in r])


def compare_methods(config: ExperimentConfig, methods=None) -> list:
    methods = list(methods or config.data["methods"] or [config.method])
    reports = [run_method(config, m) for m in methods]
    rows = []
    ref = reports[0]
    for r in reports:
        rows.append([r.method, r.value, r.foc, r.outer_iterations,
                     r.counters.get("fom_evaluations", 0), r.wall_time,
                     float(np.linalg.norm(r.mu - ref.mu)), r.relative_error, r.reason])
    write_table(config.out_dir / "compare.csv",
                ["method", "J", "foc", "outer_iterations", "fom_evaluations", "wall_time",
                 "mu_distance_to_first", "relative_error", "reason"], rows)
    for r in reports:
        write_outputs(r, config.out_dir)
    return reports
