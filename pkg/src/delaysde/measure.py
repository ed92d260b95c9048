"""Delay measure, weighted segment space and segment extraction.

The delay measure nu lives on [-r0, 0) and is discretized into cell masses
w_j = nu([theta_j, theta_{j+1})) on a uniform grid theta_j = -r0 + j*h.  A
segment is a path window sampled on the same grid, including the endpoint
theta = 0; its norm is sqrt(nu(|xi|^2) + |xi(0)|^2) with left-endpoint cell
evaluation, so the theta = 0 node carries no cell mass.

Two segments are identified when they agree at theta = 0 and on every cell of
positive mass; equality, norms and the coefficients downstream all see only
this quotient representative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DelayMeasure",
    "Segment",
    "GridMismatchError",
    "make_measure",
    "seg_norm",
    "seg_inner",
    "segments_equal",
    "extract_segment",
    "check_shift_domination",
    "constant_segment",
    "quotient_mask",
]


class GridMismatchError(ValueError):
    """A time quantity is not commensurate with the grid step."""


def grid_count(span: float, h: float, what: str = "span") -> int:
    """span / h as an exact integer, or GridMismatchError."""
    if h <= 0:
        raise ValueError(f"grid step must be positive, got {h}")
    n = span / h
    n_int = int(round(n))
    if n_int < 0 or abs(n - n_int) > 1e-9 * max(1.0, abs(n)):
        raise GridMismatchError(f"{what}={span} is not an integer multiple of h={h}")
    return n_int


@dataclass(frozen=True)
class DelayMeasure:
    """Discretized delay measure on [-r0, 0) with shift-domination function kappa."""

    r0: float
    h: float
    weights: np.ndarray  # (n_cells,) cell masses nu([theta_j, theta_{j+1}))
    kind: str
    kappa: Callable[[float], float]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or len(w) != grid_count(self.r0, self.h, "r0"):
            raise GridMismatchError("weights length must equal r0/h")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("cell masses must be finite and non-negative")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def n_cells(self) -> int:
        return len(self.weights)

    @property
    def thetas(self) -> np.ndarray:
        """Node offsets -r0, -r0+h, ..., 0 (n_cells+1 values)."""
        return -self.r0 + self.h * np.arange(self.n_cells + 1)

    def total_mass(self, window: float | None = None) -> float:
        """nu([-min(window, r0), 0)); full mass when window is None."""
        if window is None or window >= self.r0:
            return float(self.weights.sum())
        k = grid_count(self.r0 - window, self.h, "r0 - window")
        return float(self.weights[k:].sum())


@dataclass(frozen=True)
class Segment:
    """Path restriction to [-r0, 0], sampled on the measure grid (theta=0 included)."""

    values: np.ndarray  # (n_cells + 1, d)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if not np.all(np.isfinite(v)):
            raise ValueError("segment values must be finite")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def at_zero(self) -> np.ndarray:
        return self.values[-1]


def constant_segment(m: DelayMeasure, value, d: int | None = None) -> Segment:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    if d is not None and value.size == 1:
        value = np.full(d, value[0])
    return Segment(np.tile(value, (m.n_cells + 1, 1)))


def make_measure(
    kind: str,
    r0: float,
    h: float,
    lam: float | None = None,
    density: float = 1.0,
    weights: Sequence[float] | None = None,
    kappa: Callable[[float], float] | None = None,
) -> DelayMeasure:
    """Build a delay measure of a given kind.

    kind="exponential": density e^{lam*theta} on [-r0, 0); cell masses are exact
    antiderivative differences; kappa(t) = max(1, e^{-lam t}).
    kind="uniform": constant density; kappa = 1.
    kind="atoms": explicit per-cell masses (point-mass lists snapped to cells);
    kappa defaults to the measured worst shift ratio.
    """
    if r0 <= 0 or h <= 0:
        raise ValueError(f"r0 and h must be positive, got r0={r0}, h={h}")
    n = grid_count(r0, h, "r0")
    thetas = -r0 + h * np.arange(n + 1)
    if kind == "exponential":
        if lam is None:
            raise ValueError("exponential kind requires lam")
        if lam == 0.0:
            w = np.full(n, h)
        else:
            w = (np.exp(lam * thetas[1:]) - np.exp(lam * thetas[:-1])) / lam
        lam_f = float(lam)
        kap = kappa or (lambda t, _l=lam_f: max(1.0, float(np.exp(-_l * t))))
        return DelayMeasure(r0, h, w, "exponential", kap)
    if kind == "uniform":
        w = np.full(n, density * h)
        return DelayMeasure(r0, h, w, "uniform", kappa or (lambda t: 1.0))
    if kind == "atoms":
        if weights is None:
            raise ValueError("atoms kind requires explicit weights")
        w = np.asarray(weights, dtype=float)
        m = DelayMeasure(r0, h, w, "atoms", kappa or (lambda t: 1.0))
        if kappa is None:
            kap = _measured_kappa(m)
            m = DelayMeasure(r0, h, w, "atoms", kap)
        return m
    raise ValueError(f"unknown measure kind {kind!r}; expected exponential, uniform or atoms")


def _measured_kappa(m: DelayMeasure) -> Callable[[float], float]:
    """Smallest non-decreasing kappa dominating the observed grid-shift ratios."""
    w = m.weights
    n = m.n_cells
    worst = np.ones(n + 1)
    for k in range(1, n + 1):
        shifted = np.zeros(n)
        shifted[k:] = w[: n - k]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ratio = np.where(w > 0, shifted / np.where(w > 0, w, 1.0), np.where(shifted > 0, np.inf, 0.0))
        worst[k] = max(1.0, float(ratio.max()) if len(ratio) else 1.0)
    env = np.maximum.accumulate(worst)

    def kap(t: float) -> float:
        k = min(int(np.ceil(t / m.h - 1e-12)), n)
        return float(env[max(k, 0)])

    return kap


def quotient_mask(m: DelayMeasure) -> np.ndarray:
    """(n_cells+1,) 0/1 mask: positive-mass cells plus the theta=0 node."""
    mask = np.empty(m.n_cells + 1)
    mask[:-1] = (m.weights > 0).astype(float)
    mask[-1] = 1.0
    return mask


def _check_compat(m: DelayMeasure, xi: Segment) -> None:
    if xi.values.shape[0] != m.n_cells + 1:
        raise GridMismatchError(
            f"segment has {xi.values.shape[0]} nodes, measure grid expects {m.n_cells + 1}"
        )


def seg_norm(m: DelayMeasure, xi: Segment) -> float:
    """C_nu norm sqrt(nu(|xi|^2) + |xi(0)|^2), left-endpoint cell rule."""
    _check_compat(m, xi)
    sq = np.sum(xi.values**2, axis=1)
    return float(np.sqrt(m.weights @ sq[:-1] + sq[-1]))


def seg_inner(m: DelayMeasure, xi: Segment, eta: Segment) -> float:
    """C_nu inner product nu(<xi, eta>) + <xi(0), eta(0)>."""
    _check_compat(m, xi)
    _check_compat(m, eta)
    if xi.d != eta.d:
        raise GridMismatchError("segment dimensions differ")
    dots = np.sum(xi.values * eta.values, axis=1)
    return float(m.weights @ dots[:-1] + dots[-1])


def segments_equal(m: DelayMeasure, xi: Segment, eta: Segment, tol: float = 0.0) -> bool:
    """Equality in the C_nu quotient: agree at theta=0 and on every positive-mass cell."""
    _check_compat(m, xi)
    _check_compat(m, eta)
    if xi.d != eta.d:
        return False
    diff = np.abs(xi.values - eta.values).max(axis=1)
    if diff[-1] > tol:
        return False
    return bool(np.all(diff[:-1][m.weights > 0] <= tol))


def batch_seg_norm(m: DelayMeasure, values: np.ndarray) -> np.ndarray:
    """Norms for a batch of segment value arrays, shape (n, n_cells+1, d) -> (n,)."""
    sq = np.sum(values**2, axis=2)
    return np.sqrt(sq[:, :-1] @ m.weights + sq[:, -1])


def extract_segment(path, t: float) -> Segment:
    """Segment of a sample path at grid time t (path must cover [t-r0, t])."""
    i = grid_count(t - path.t_min, path.h, "t - t_min")
    n0 = grid_count(path.r0, path.h, "r0")
    if i < n0 or i >= path.states.shape[0]:
        raise ValueError(
            f"t={t} not covered: need [t-r0, t] within [{path.t_min}, "
            f"{path.t_min + path.h * (path.states.shape[0] - 1)}]"
        )
    return Segment(path.states[i - n0 : i + 1])


@dataclass
class ShiftDominationReport:
    passed: bool
    worst_ratio: float  # max over shifts of (shifted mass) / (kappa * mass)
    worst_shift: float | None
    witness_cell: int | None
    details: list = field(default_factory=list)


def check_shift_domination(m: DelayMeasure, t_max: float) -> ShiftDominationReport:
    """Verify the discrete inequality w_{j-k} <= kappa(k h) w_j for grid shifts up to t_max.

    Shifted mass landing on a zero-mass cell is an immediate failure witness.
    """
    k_max = min(grid_count(t_max, m.h, "t_max"), m.n_cells)
    w = m.weights
    n = m.n_cells
    worst = 0.0
    worst_shift = None
    witness = None
    details = []
    for k in range(1, k_max + 1):
        kap = m.kappa(k * m.h)
        shifted = np.zeros(n)
        shifted[k:] = w[: n - k]
        for j in range(n):
            if w[j] > 0:
                r = shifted[j] / (kap * w[j])
            else:
                r = np.inf if shifted[j] > 0 else 0.0
            if r > worst:
                worst, worst_shift, witness = r, k * m.h, j
        details.append((k * m.h, kap))
    return ShiftDominationReport(
        passed=worst <= 1.0 + 1e-12,
        worst_ratio=worst,
        worst_shift=worst_shift,
        witness_cell=witness,
        details=details,
    )
