"""Pure-numpy versions of the compiled kernels."""
import numpy as np


def scatter_add(positions, local, size):
    mask = positions >= 0
    return np.bincount(positions[mask], weights=local[mask], minlength=size).astype(float)


def combine_rows(weights, components):
    return np.tensordot(np.asarray(weights, dtype=float), components, axes=1)
