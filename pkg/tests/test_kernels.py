import os
import subprocess
import sys

import numpy as np
import pytest

from certopt import _kernels_py, kernels

compiled = pytest.importorskip("certopt._kernels", reason="compiled extension not built")


def test_backends_agree(rng):
    pos = rng.integers(-1, 50, size=(30, 16))
    local = rng.standard_normal((30, 16))
    assert np.allclose(compiled.scatter_add(pos, local, 50), _kernels_py.scatter_add(pos, local, 50),
                       rtol=1e-13, atol=1e-13)
    w = rng.standard_normal(4)
    comps = rng.standard_normal((4, 6, 7))
    assert np.allclose(compiled.combine_rows(w, comps), _kernels_py.combine_rows(w, comps), rtol=1e-13)


def test_negative_positions_dropped():
    out = _kernels_py.scatter_add(np.array([[0, -1, 0]]), np.array([[1.0, 5.0, 2.0]]), 2)
    assert np.array_equal(out, [3.0, 0.0])


def test_environment_forces_fallback():
    env = dict(os.environ, CERTOPT_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import certopt.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert kernels.BACKEND == "cython"
