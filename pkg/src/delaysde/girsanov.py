"""Drift removal by change of measure and importance-weighted weak estimates.

The reference process Z keeps only the linear part and the noise; the removed
drift is compensated by the exponential density R built from the shift
psi = Q*(QQ*)^{-1}(b + B).  Left-endpoint accumulation makes each discrete
factor conditionally unit-mean lognormal, so E[R] = 1 exactly at any step
size, which keeps the martingale checks sharp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .measure import DelayMeasure, Segment, grid_count, quotient_mask
from .model import ModelSpec, _zero_b, _zero_B
from .solver import SolverConfig, simulate

__all__ = [
    "SingularDiffusionError",
    "WeakEstimate",
    "girsanov_shift",
    "log_density",
    "weak_estimate",
    "direct_estimate",
]

_COND_FLOOR = 1e-12


class SingularDiffusionError(np.linalg.LinAlgError):
    """QQ* is numerically singular at a visited state."""


def solve_qqt(Q: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Q*(QQ*)^{-1} rhs for batched Q (n, d, dbar) and rhs (n, d)."""
    QQt = np.einsum("nik,njk->nij", Q, Q)
    d = QQt.shape[-1]
    if d == 1:
        diag = QQt[:, 0, 0]
        if np.any(np.abs(diag) < _COND_FLOOR):
            raise SingularDiffusionError("QQ* below the conditioning floor")
        y = rhs / diag[:, None]
    else:
        ev = np.linalg.eigvalsh(QQt)
        if ev[:, 0].min() < _COND_FLOOR * max(1.0, ev[:, -1].max()):
            raise SingularDiffusionError("QQ* below the conditioning floor")
        y = np.linalg.solve(QQt, rhs[..., None])[..., 0]
    return np.einsum("ndk,nd->nk", Q, y)


def girsanov_shift(
    m: ModelSpec, nu: DelayMeasure, t: float, seg: np.ndarray
) -> np.ndarray:
    """psi(t) = Q*(QQ*)^{-1}{b(t, xi(0)) + B(t, xi_t)} for a batch of segments."""
    seg = np.asarray(seg, dtype=float)
    if seg.ndim == 2:
        seg = seg[None]
    mask = quotient_mask(nu)
    bseg = seg if np.all(mask > 0) else seg * mask[None, :, None]
    x = seg[:, -1]
    drift = m.b(t, x) + m.B(t, bseg, nu)
    return solve_qqt(m.Q(t, x), drift)


def _reference_model(m: ModelSpec) -> ModelSpec:
    return ModelSpec(
        name=f"{m.name}[linear]", d=m.d, dbar=m.dbar, A=m.A,
        b=_zero_b, B=_zero_B, Q=m.Q, Q_bounds=m.Q_bounds, params=m.params,
    )


def log_density(m: ModelSpec, nu: DelayMeasure, batch, cfg: SolverConfig) -> np.ndarray:
    """log R along simulated paths: sum <psi_k, dW_k> - (h/2) sum |psi_k|^2."""
    n0 = grid_count(nu.r0, cfg.h, "r0")
    steps = batch.dW.shape[1]
    mask = quotient_mask(nu)
    mask_trivial = bool(np.all(mask > 0))
    log_r = np.zeros(batch.n_paths)
    h = cfg.h
    for k in range(steps):
        seg = batch.states[:, k : n0 + k + 1]
        bseg = seg if mask_trivial else seg * mask[None, :, None]
        x = seg[:, -1]
        drift = m.b(k * h, x) + m.B(k * h, bseg, nu)
        psi = solve_qqt(m.Q(k * h, x), drift)
        log_r += np.einsum("nk,nk->n", psi, batch.dW[:, k]) - 0.5 * h * np.sum(psi**2, axis=1)
    return log_r


@dataclass
class WeakEstimate:
    unnormalized: float
    self_normalized: float
    stderr: float
    mean_R: float
    stderr_R: float
    ess: float
    n_paths: int
    warnings: list = field(default_factory=list)


def weak_estimate(
    m: ModelSpec,
    nu: DelayMeasure,
    xi: Segment,
    f,
    T: float,
    cfg: SolverConfig,
    base_seed: int,
    n_paths: int,
    chunk: int = 8192,
) -> WeakEstimate:
    """E[f(X_T-segment)] estimated as E[R f(Z_T-segment)] under the reference law.

    Z drops b and B; R restores them.  Returns both the unnormalized and the
    self-normalized importance estimates with the martingale diagnostics.
    """
    if abs(cfg.t_end - T) > 1e-12:
        raise ValueError("cfg.t_end must equal the functional horizon T")
    ref = _reference_model(m)
    s_r = s_r2 = s_rf = s_rf2 = 0.0
    done = 0
    while done < n_paths:
        n = min(chunk, n_paths - done)
        batch = simulate(ref, nu, xi, cfg, base_seed, n, path_offset=done)
        log_r = log_density(m, nu, batch, cfg)
        r = np.exp(log_r)
        fv = np.asarray(f(batch.terminal_segments()), dtype=float)
        rf = r * fv
        s_r += r.sum()
        s_r2 += (r**2).sum()
        s_rf += rf.sum()
        s_rf2 += (rf**2).sum()
        done += n
    n = float(n_paths)
    mean_rf = s_rf / n
    var_rf = max(s_rf2 / n - mean_rf**2, 0.0)
    mean_r = s_r / n
    var_r = max(s_r2 / n - mean_r**2, 0.0)
    ess = s_r**2 / max(s_r2, 1e-300)
    warnings = []
    if ess < 0.01 * n:
        warnings.append(
            f"degenerate importance weights: ess={ess:.1f} of {n_paths} paths"
        )
    return WeakEstimate(
        unnormalized=float(mean_rf),
        self_normalized=float(s_rf / max(s_r, 1e-300)),
        stderr=float(math.sqrt(var_rf / n)),
        mean_R=float(mean_r),
        stderr_R=float(math.sqrt(var_r / n)),
        ess=float(ess),
        n_paths=n_paths,
        warnings=warnings,
    )


def direct_estimate(
    m: ModelSpec,
    nu: DelayMeasure,
    xi: Segment,
    f,
    T: float,
    cfg: SolverConfig,
    base_seed: int,
    n_paths: int,
    chunk: int = 8192,
) -> tuple[float, float]:
    """Plain Monte Carlo (mean, stderr) of f at the T-segment of the full dynamics."""
    if abs(cfg.t_end - T) > 1e-12:
        raise ValueError("cfg.t_end must equal the functional horizon T")
    s = s2 = 0.0
    done = 0
    while done < n_paths:
        n = min(chunk, n_paths - done)
        batch = simulate(m, nu, xi, cfg, base_seed, n, path_offset=done)
        fv = np.asarray(f(batch.terminal_segments()), dtype=float)
        s += fv.sum()
        s2 += (fv**2).sum()
        done += n
    mean = s / n_paths
    var = max(s2 / n_paths - mean**2, 0.0)
    return float(mean), float(math.sqrt(var / n_paths))
