"""Compiled vs pure-numpy kernels on assembly-sized inputs.

Usage: python3 benchmarks/bench_kernels.py [--n 256] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from certopt import _kernels_py
from certopt.discretization import Q1Assembler, build_grid, ElementMatrices, PiecewiseConstantField

try:
    from certopt import _kernels
except ImportError:
    _kernels = None


def inputs(n: int):
    grid = build_grid(n)
    asm = Q1Assembler(grid)
    local = ElementMatrices(grid, PiecewiseConstantField.constant(), "diffusion").local.reshape(-1, 16)
    rng = np.random.default_rng(0)
    comps = rng.standard_normal((8, 5, 2000))
    return asm._positions, np.ascontiguousarray(local), asm._nnz, rng.standard_normal(8), comps


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    pos, local, nnz, w, comps = inputs(args.n)
    impls = [("python", _kernels_py)] + ([("cython", _kernels)] if _kernels is not None else [])
    ref = None
    print(f"{'kernel':<14}{'backend':<10}{'best [ms]':>12}")
    for name, fn_args in [("scatter_add", (pos, local, nnz)), ("combine_rows", (w, comps))]:
        for backend, mod in impls:
            fn = getattr(mod, name)
            out = fn(*fn_args)
            if backend == "python":
                ref = out
            else:
                assert np.allclose(out, ref), f"{name}: backends disagree"
            t = min(timeit.repeat(lambda: fn(*fn_args), number=3, repeat=args.repeat)) / 3
            print(f"{name:<14}{backend:<10}{1e3 * t:>12.3f}")
    if _kernels is None:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
