"""Counter-based random number streams for reproducible parallel Monte Carlo.

Each path owns a Philox stream keyed by (base_seed, path_index); the step index
is carried by the counter because every step consumes a fixed number of
uniforms.  Results are therefore independent of how paths are distributed over
workers.  Gaussian increments come from the inverse normal CDF, so refinement
coupling (summing child increments pairwise) is exact.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import ndtri

__all__ = ["path_generator", "normal_increments", "coarsen_increments"]

_U64 = np.uint64
# random() can return exactly 0.0; ndtri(0) = -inf.  Substitute the smallest
# representable draw instead of re-drawing, to keep consumption fixed.
_U_FLOOR = 2.0 ** -54


def path_generator(base_seed: int, path_index: int) -> Generator:
    """Philox generator for one path, independent across path indices."""
    if base_seed < 0 or path_index < 0:
        raise ValueError("base_seed and path_index must be non-negative")
    key = np.array([base_seed, path_index], dtype=_U64)
    return Generator(Philox(key=key))


def normal_increments(
    base_seed: int, path_index: int, n_steps: int, dbar: int, h: float
) -> np.ndarray:
    """Gaussian increments dW ~ N(0, h I), shape (n_steps, dbar)."""
    gen = path_generator(base_seed, path_index)
    u = gen.random((n_steps, dbar))
    np.maximum(u, _U_FLOOR, out=u)
    return ndtri(u) * np.sqrt(h)


def batch_increments(
    base_seed: int, path_offset: int, n_paths: int, n_steps: int, dbar: int, h: float
) -> np.ndarray:
    """Increments for paths path_offset..path_offset+n_paths-1, shape (n_paths, n_steps, dbar)."""
    out = np.empty((n_paths, n_steps, dbar))
    for i in range(n_paths):
        out[i] = normal_increments(base_seed, path_offset + i, n_steps, dbar, h)
    return out


def coarsen_increments(dw: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive groups of `factor` increments along the step axis.

    Maps increments on step h to increments on step factor*h over the same
    Brownian path; used by the strong-order and h-halving tests.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    step_axis = dw.ndim - 2
    n_steps = dw.shape[step_axis]
    if n_steps % factor != 0:
        raise ValueError(f"{n_steps} steps not divisible by factor {factor}")
    shape = dw.shape[:step_axis] + (n_steps // factor, factor) + dw.shape[step_axis + 1 :]
    return dw.reshape(shape).sum(axis=step_axis + 1)
