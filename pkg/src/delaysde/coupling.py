"""Coupling by change of measures for the transformed delay equation.

Two copies share one Brownian motion: X carries the target dynamics; Y gets
the drift of X plus a bridging pull (X - Y)/gamma that forces the states to
meet before T.  After the meeting time the states are clamped together so the
terminal segments agree exactly.  The density R that makes Y's law the target
law started from the second initial segment accumulates the delay-mismatch
drift over all of [0, T): histories keep differing for up to r0 after the
states meet, and that tail is what produces the segment-norm term in the
entropy cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .girsanov import solve_qqt
from .measure import DelayMeasure, grid_count, quotient_mask
from .rng import batch_increments
from .zvonkin import TransformedModel, theta_inverse

__all__ = [
    "CouplingConfig",
    "CouplingResult",
    "gamma",
    "gamma_prime",
    "coupled_step",
    "run_coupling",
    "run_coupling_batch",
    "entropy_cost",
    "fit_entropy_cost",
]


def gamma(t, T: float, K: float):
    """Bridging clock (1 - e^{(t-T)K^2})/K^2 on [0, T]; K = 0 gives T - t."""
    t = np.asarray(t, dtype=float)
    if np.any(t < -1e-12) or np.any(t > T + 1e-12):
        raise ValueError("gamma is defined on [0, T]")
    if K == 0.0:
        out = T - t
    else:
        out = (1.0 - np.exp((t - T) * K**2)) / K**2
    return float(out) if out.ndim == 0 else out


def gamma_prime(t, T: float, K: float):
    """d/dt of the bridging clock; satisfies 2 + gamma' - K^2 gamma = 1."""
    t = np.asarray(t, dtype=float)
    if np.any(t < -1e-12) or np.any(t > T + 1e-12):
        raise ValueError("gamma is defined on [0, T]")
    out = -np.exp((t - T) * K**2) if K != 0.0 else -np.ones_like(t)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CouplingConfig:
    T: float
    h: float
    K: float
    delta_scale: float = 1e-8

    def __post_init__(self):
        if self.T <= 0 or self.h <= 0 or self.K < 0:
            raise ValueError("need T > 0, h > 0, K >= 0")
        grid_count(self.T, self.h, "T")


@dataclass
class CouplingResult:
    tau: np.ndarray  # (n,) meeting time, nan if the states never met by T
    log_R: np.ndarray  # (n,)
    x_states: np.ndarray  # (n, N+1, d) on [-r0, T+r0]
    y_states: np.ndarray
    delta: float
    T: float
    h: float
    r0: float
    base_seed: int
    path_offset: int
    dW: np.ndarray = field(repr=False, default=None)
    failed: np.ndarray = None  # (n,) overflow in the bridging drift; frozen, not crashed

    @property
    def coupled(self) -> np.ndarray:
        return ~np.isnan(self.tau)

    @property
    def R(self) -> np.ndarray:
        return np.exp(self.log_R)

    def terminal_segments_equal(self) -> np.ndarray:
        n0 = grid_count(self.r0, self.h, "r0")
        diff = np.abs(self.x_states[:, -n0 - 1 :] - self.y_states[:, -n0 - 1 :])
        return diff.reshape(diff.shape[0], -1).max(axis=1) == 0.0


def coupled_step(
    tm: TransformedModel,
    nu: DelayMeasure,
    x_seg: np.ndarray,
    y_seg: np.ndarray,
    t: float,
    dW: np.ndarray,
    cc: CouplingConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One Euler step of the coupled pair from segment windows (n, n0+1, d).

    Returns (X next, Y next, phi).  Generic reference path: each call pulls
    the windows back through the transform; the batch runner caches those
    inversions instead but takes the same step.
    """
    x_seg = np.asarray(x_seg, dtype=float)
    y_seg = np.asarray(y_seg, dtype=float)
    if x_seg.ndim == 2:
        x_seg, y_seg = x_seg[None], y_seg[None]
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    m = tm.model
    T, h, K = cc.T, cc.h, cc.K
    msk = quotient_mask(nu)
    xs, ys = x_seg[:, -1], y_seg[:, -1]
    Bx = m.B(t, x_seg * msk[None, :, None], nu)
    By = m.B(t, y_seg * msk[None, :, None], nu)
    Qx, Qy = m.Q(t, xs), m.Q(t, ys)
    if t < T - 1e-12:
        gamma_floor = gamma(T - 0.5 * h, T, K)
        ghat = max(gamma(min(t + 0.5 * h, T), T, K), gamma_floor)
        z = solve_qqt(Qx, xs - ys)
        phi = solve_qqt(Qy, By - Bx) - z / ghat
        bridge = np.einsum("ncj,nj->nc", Qy, z) / ghat
    else:
        phi = np.zeros((xs.shape[0], m.dbar))
        bridge = 0.0
    xn = xs + h * Bx + np.einsum("ncj,nj->nc", Qx, dW)
    yn = ys + h * (Bx + bridge) + np.einsum("ncj,nj->nc", Qy, dW)
    return xn, yn, phi


def run_coupling_batch(
    tm: TransformedModel,
    nu: DelayMeasure,
    xi_t: np.ndarray,
    eta_t: np.ndarray,
    cc: CouplingConfig,
    base_seed: int,
    n_paths: int,
    path_offset: int = 0,
    dW: np.ndarray | None = None,
) -> CouplingResult:
    """Integrate the coupled pair on [0, T + r0] from transformed segments xi_t, eta_t.

    The bridging drift uses the midpoint value of gamma on each step, floored
    at its last-step value so the pull stays finite; states within
    delta = delta_scale * (1 + |xi(0) - eta(0)|) are declared met and clamped.
    """
    m = tm.model
    base = tm.base
    sol = tm.sol
    T, h, K = cc.T, cc.h, cc.K
    n0 = grid_count(nu.r0, h, "r0")
    steps_T = grid_count(T, h, "T")
    steps = steps_T + n0
    d, dbar = m.d, m.dbar
    xi_t = np.asarray(xi_t, dtype=float)
    eta_t = np.asarray(eta_t, dtype=float)
    delta = cc.delta_scale * (1.0 + float(np.linalg.norm(xi_t[-1] - eta_t[-1])))
    if dW is None:
        dW = batch_increments(base_seed, path_offset, n_paths, steps, dbar, h)
    x = np.empty((n_paths, n0 + steps + 1, d))
    y = np.empty_like(x)
    x[:, : n0 + 1] = xi_t
    y[:, : n0 + 1] = eta_t
    msk = quotient_mask(nu)
    trivial = bool(np.all(msk > 0))
    a = base.A.eigenvalues
    lam = sol.lam if sol is not None else 0.0
    if sol is None:
        xinv, yinv = x, y
    else:
        xinv = np.empty_like(x)
        yinv = np.empty_like(y)
        for i in range(n0 + 1):
            t_i = (i - n0) * h
            xinv[:, i] = theta_inverse(sol, t_i, x[:, i])
            yinv[:, i] = theta_inverse(sol, t_i, y[:, i])
    gamma_floor = gamma(T - 0.5 * h, T, K)
    log_r = np.zeros(n_paths)
    tau = np.full(n_paths, np.nan)
    failed = np.zeros(n_paths, dtype=bool)
    met = np.linalg.norm(x[:, n0] - y[:, n0], axis=1) <= delta
    tau[met] = 0.0
    y[met, n0] = x[met, n0]
    eye = np.eye(d)[None]

    def tilde_coeffs(t, point_inv, window_inv, state):
        bw = window_inv if trivial else window_inv * msk[None, :, None]
        Bv = base.B(t, bw, nu)
        if sol is None:
            return -a * state + Bv, base.Q(t, state)
        u0 = sol.eval_u(t, point_inv)
        dth = eye + sol.eval_du(t, point_inv)
        drift = -a * state + (lam + a) * u0 + np.einsum("nck,nk->nc", dth, Bv)
        Qv = np.einsum("nck,nkj->ncj", dth, base.Q(t, point_inv))
        return drift, Qv

    for k in range(steps):
        t = k * h
        idx = n0 + k
        xs, ys = x[:, idx], y[:, idx]
        Bx, Qx = tilde_coeffs(t, xinv[:, idx], xinv[:, k : idx + 1], xs)
        By, Qy = tilde_coeffs(t, yinv[:, idx], yinv[:, k : idx + 1], ys)
        in_window = t < T - 1e-12
        if in_window:
            ghat = max(gamma(min(t + 0.5 * h, T), T, K), gamma_floor)
            z = solve_qqt(Qx, xs - ys)  # (n, dbar): Q*(QQ*)^{-1}(X - Y)
            phi = solve_qqt(Qy, By - Bx) - z / ghat
            log_r += np.einsum("nk,nk->n", phi, dW[:, k]) - 0.5 * h * np.sum(phi**2, axis=1)
            bridge = np.einsum("ncj,nj->nc", Qy, z) / ghat
        else:
            bridge = 0.0
        noise_x = np.einsum("ncj,nj->nc", Qx, dW[:, k])
        noise_y = np.einsum("ncj,nj->nc", Qy, dW[:, k])
        with np.errstate(over="ignore", invalid="ignore"):
            xn = xs + h * Bx + noise_x
            yn = ys + h * (Bx + bridge) + noise_y
        bad = ~(np.all(np.isfinite(xn), axis=1) & np.all(np.isfinite(yn), axis=1))
        if np.any(bad):
            failed |= bad
            xn[bad] = xs[bad]
            yn[bad] = ys[bad]
        xn[failed] = xs[failed]
        yn[failed] = ys[failed]
        already = ~np.isnan(tau)
        yn[already] = xn[already]
        newly = ~already & ~failed & (np.linalg.norm(xn - yn, axis=1) <= delta)
        yn[newly] = xn[newly]
        tau[newly] = t + h
        x[:, idx + 1] = xn
        y[:, idx + 1] = yn
        if sol is not None:
            xinv[:, idx + 1] = theta_inverse(sol, t + h, xn)
            yinv[:, idx + 1] = np.where(
                (already | newly)[:, None], xinv[:, idx + 1], theta_inverse(sol, t + h, yn)
            )
    return CouplingResult(
        tau, log_r, x, y, delta, T, h, nu.r0, base_seed, path_offset, dW, failed
    )


def run_coupling(tm, nu, xi_t, eta_t, cc, seed) -> CouplingResult:
    """Single-pair convenience wrapper."""
    base, idx = seed if isinstance(seed, tuple) else (seed, 0)
    return run_coupling_batch(tm, nu, xi_t, eta_t, cc, base, 1, path_offset=idx)


@dataclass
class EntropyEstimate:
    value: float  # E_Q log R as E_P[R log R] / E_P[R]
    stderr: float
    unnormalized: float  # plain E_P[R log R]
    mean_R: float
    stderr_R: float
    ess: float
    n_paths: int
    warnings: list = field(default_factory=list)


def entropy_cost(res: CouplingResult) -> EntropyEstimate:
    """Relative-entropy cost of the coupling from one result batch."""
    r = res.R
    rlr = r * res.log_R
    n = len(r)
    mean_r = float(r.mean())
    stderr_r = float(r.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    value = float(rlr.sum() / max(r.sum(), 1e-300))
    # delta-method stderr of the ratio estimator
    resid = rlr - value * r
    stderr = float(resid.std(ddof=1) / (max(mean_r, 1e-300) * math.sqrt(n))) if n > 1 else 0.0
    ess = float(r.sum() ** 2 / max((r**2).sum(), 1e-300))
    warnings = []
    if ess < 0.01 * n:
        warnings.append(f"degenerate coupling weights: ess={ess:.1f} of {n}")
    return EntropyEstimate(
        value=value,
        stderr=stderr,
        unnormalized=float(rlr.mean()),
        mean_R=mean_r,
        stderr_R=stderr_r,
        ess=ess,
        n_paths=n,
        warnings=warnings,
    )


@dataclass
class EntropyFit:
    c1: float  # coefficient of |xi(0) - eta(0)|^2 / T
    c2: float  # coefficient of ||xi - eta||^2
    rel_residual: float
    predictions: np.ndarray
    values: np.ndarray


def fit_entropy_cost(d0_sq_over_T, seg_sq, values) -> EntropyFit:
    """Least-squares fit of entropy costs to c1 |xi(0)-eta(0)|^2/T + c2 ||xi-eta||^2."""
    f1 = np.asarray(d0_sq_over_T, dtype=float)
    f2 = np.asarray(seg_sq, dtype=float)
    v = np.asarray(values, dtype=float)
    A = np.stack([f1, f2], axis=1)
    coef, *_ = np.linalg.lstsq(A, v, rcond=None)
    pred = A @ coef
    rel = float(np.linalg.norm(pred - v) / max(np.linalg.norm(v), 1e-300))
    return EntropyFit(float(coef[0]), float(coef[1]), rel, pred, v)
