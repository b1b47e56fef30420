"""Command line entry point: ``certopt <subcommand> --config cfg.json``."""
from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .experiments import (METHODS, ConfigError, ExperimentConfig, compare_methods, fmt,
                          parse_config, run_method, validate_config, write_outputs, write_table)


def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else validate_config({"schema_version": 1})
    methods = None
    method = None
    if args.method:
        names = [m.strip() for m in args.method.split(",") if m.strip()]
        bad = [m for m in names if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; known: {', '.join(METHODS)}")
        method, methods = names[0], (names if len(names) > 1 else None)
    return cfg.with_overrides(seed=args.seed, threads=args.threads, out=args.out, method=method,
                              methods=methods)


def _training(cfg: ExperimentConfig, spec):
    return spec.box.sample(cfg.data["greedy"]["training_size"], cfg.seed)


def _dump(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_fom_solve(cfg: ExperimentConfig) -> dict:
    from .discretization import write_matrix_market
    from .problems import build_fem_problem
    spec = cfg.problem()
    fom = build_fem_problem(spec)
    mu = spec.point(spec.mu_0)
    sol = fom.value_and_gradient(mu)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if cfg.data["output"]["matrix_market"]:
        write_matrix_market(out / "fom_matrix.mtx", fom.operator.evaluate(mu))
        write_matrix_market(out / "fom_rhs.mtx", fom.rhs.evaluate(mu)[:, None])
    np.savetxt(out / "fom_state.csv", sol.u, fmt="%.17g")
    summary = {"mu": [float(x) for x in mu], "value": float(sol.value),
               "gradient": [float(g) for g in sol.gradient], "num_dofs": int(fom.num_dofs)}
    _dump(out / "fom_solve.json", summary)
    return summary


def cmd_rb_greedy(cfg: ExperimentConfig) -> dict:
    from .problems import build_fem_problem
    from .rb_global import weak_greedy
    spec = cfg.problem()
    fom = build_fem_problem(spec)
    g = cfg.data["greedy"]
    res = weak_greedy(fom, _training(cfg, spec), g["max_size"], quantity=g["quantity"])
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    res.rom.save(out / "global_rom.npz")
    write_table(out / "rb_greedy.csv", ["step", "training_index", "max_estimate"],
                [[i, s, float(m)] for i, (s, m) in enumerate(zip(res.selected, res.max_estimates))])
    summary = {"basis_sizes": list(res.reductor.spaces.sizes), "selected": res.selected,
               "max_estimates": res.max_estimates}
    _dump(out / "rb_greedy.json", summary)
    return summary


def cmd_run(cfg: ExperimentConfig, allowed: tuple) -> dict:
    """Run the configured method when it belongs to ``allowed``, else the first of them."""
    method = cfg.method if cfg.method in allowed else allowed[0]
    report = run_method(cfg, method)
    write_outputs(report, cfg.out_dir)
    return report.summary()


def cmd_lod_solve(cfg: ExperimentConfig) -> dict:
    from .discretization import write_matrix_market
    from .lod_two_scale import build_lod_problem, fem_reference_error
    spec = cfg.problem()
    opt = build_lod_problem(spec, threads=cfg.threads)
    mu = spec.point(spec.mu_0)
    sol = opt.value_and_gradient(mu)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if cfg.data["output"]["matrix_market"]:
        write_matrix_market(out / "lod_matrix.mtx", sol.stiffness)
    summary = {"mu": [float(x) for x in mu], "value": float(sol.value),
               "gradient": [float(g) for g in sol.gradient],
               "relative_l2_error_to_fem": fem_reference_error(opt.lod, mu),
               "counters": dict(opt.counters)}
    _dump(out / "lod_solve.json", summary)
    return summary


def _stage1(cfg: ExperimentConfig):
    from .lod_two_scale import build_lod_problem
    from .rb_localized import stage1_build
    spec = cfg.problem()
    opt = build_lod_problem(spec, threads=cfg.threads)
    constants = opt.lod.constants()
    roms, traces = stage1_build(opt.lod, _training(cfg, spec), cfg.tolerances["eps1"], constants.alpha,
                                cfg.threads)
    return spec, opt, constants, roms, traces


def _write_stage1(cfg, roms, traces, training) -> dict:
    from .rb_localized import save_stage1
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    save_stage1(roms, out / "stage1.npz")
    rows = []
    for tr in traces:
        for step, (size, i, j, eta) in enumerate(tr.steps):
            rows.append([tr.element, step, i, j, float(eta)] + [float(m) for m in training[i]])
    P = training.shape[1]
    write_table(out / "stage1_traces.csv",
                ["element", "step", "training_index", "shape_function", "eta"] + [f"mu_{k}" for k in range(P)],
                rows)
    return {"sizes": [r.size for r in roms], "residual_sizes": [r.residual_size for r in roms],
            "status": dict(Counter(t.status for t in traces))}


def cmd_stage1_build(cfg: ExperimentConfig) -> dict:
    spec, _, _, roms, traces = _stage1(cfg)
    summary = _write_stage1(cfg, roms, traces, _training(cfg, spec))
    _dump(cfg.out_dir / "stage1.json", summary)
    return summary


def cmd_tsrblod_offline(cfg: ExperimentConfig) -> dict:
    from .rb_localized import LocalizedReduction, stage2_greedy
    spec, opt, constants, roms, traces = _stage1(cfg)
    training = _training(cfg, spec)
    summary = _write_stage1(cfg, roms, traces, training)
    red = LocalizedReduction(opt, roms, constants)
    g = stage2_greedy(red, training, cfg.tolerances["eps2"])
    g.rom.save(cfg.out_dir / "stage2.npz")
    write_table(cfg.out_dir / "stage2_greedy.csv", ["step", "training_index", "max_estimate"],
                [[i, s, float(m)] for i, (s, m) in enumerate(zip(g.selected, g.max_estimates))])
    summary.update({"stage2_size": g.rom.size, "stage2_residual_size": g.rom.residual_size,
                    "stage2_status": g.status, "stage2_max_estimates": g.max_estimates})
    _dump(cfg.out_dir / "tsrblod_offline.json", summary)
    return summary


def cmd_compare(cfg: ExperimentConfig) -> dict:
    reports = compare_methods(cfg)
    return {"methods": [r.summary() for r in reports]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="certopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("fom-solve", "solve the FEM problem at mu_0"),
        ("rb-greedy", "global RB weak greedy on the FEM problem"),
        ("tr-rb", "trust-region RB optimization (FEM full-order model)"),
        ("lod-solve", "PG-LOD solve at mu_0"),
        ("stage1-build", "Stage-1 corrector greedy on every coarse element"),
        ("tsrblod-offline", "Stage-1 and Stage-2 greedy"),
        ("tr-lrb", "trust-region optimization with localized reduced models"),
        ("compare", "run several methods and write a joint table"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", type=Path, help="JSON experiment configuration")
        p.add_argument("--out", type=Path, help="output directory (created if missing)")
        p.add_argument("--seed", type=int, help="seed for training sets and random parameters")
        p.add_argument("--method", help=f"method name or comma list: {', '.join(METHODS)}")
        p.add_argument("--threads", type=int, help="threads for per-element loops")
    return parser


COMMANDS = {
    "fom-solve": cmd_fom_solve,
    "rb-greedy": cmd_rb_greedy,
    "tr-rb": lambda c: cmd_run(c, ("tr_rb", "r_tr_rb")),
    "lod-solve": cmd_lod_solve,
    "stage1-build": cmd_stage1_build,
    "tsrblod-offline": cmd_tsrblod_offline,
    "tr-lrb": lambda c: cmd_run(c, ("tr_tsrblod", "tr_rblod", "r_tr_tsrblod", "r_tr_rblod")),
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True, default=lambda o: fmt(o) if np.isscalar(o) else str(o)))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
