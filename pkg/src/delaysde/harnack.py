"""Monte Carlo semigroup estimates, the log-Harnack inequality check and the
L2 gradient estimate check.

The inequality test is an exact-chain test: with self-normalized coupling
weights the bound

    E_Q[log f(terminal segment)] <= log E[f] + E_Q[log R]

is an instance of the Gibbs inequality on the empirical sample, so the only
slack needed is the Monte Carlo error of the independently estimated terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coupling import CouplingConfig, entropy_cost, run_coupling_batch
from .measure import DelayMeasure, Segment, batch_seg_norm, grid_count
from .model import ModelSpec
from .rng import batch_increments
from .solver import SolverConfig, simulate
from .zvonkin import TransformedModel, simulate_transformed

__all__ = [
    "EstimateReport",
    "ExplosionBeforeHorizonError",
    "estimate_P",
    "check_log_harnack",
    "check_gradient_estimate",
]


class ExplosionBeforeHorizonError(RuntimeError):
    def __init__(self, fraction: float):
        super().__init__(f"{fraction:.2%} of paths hit their lifetime before the horizon")
        self.fraction = fraction


@dataclass
class EstimateReport:
    value: float
    stderr: float
    n: int
    tag: str
    setting: dict = field(default_factory=dict)


def _terminal_values(m, nu, xi_vals, f, horizon, h, base_seed, n, chunk, path_offset=0):
    """Stream terminal-segment f values (and squares) over chunks."""
    s = s2 = 0.0
    done = 0
    while done < n:
        k = min(chunk, n - done)
        if isinstance(m, TransformedModel):
            cfg = SolverConfig(h=h, t_end=horizon)
            states, _ = simulate_transformed(
                m, nu, xi_vals, cfg, base_seed, k, path_offset=path_offset + done
            )
            n0 = grid_count(nu.r0, h, "r0")
            fv = np.asarray(f(states[:, -n0 - 1 :]), dtype=float)
        else:
            cfg = SolverConfig(h=h, t_end=horizon)
            batch = simulate(m, nu, Segment(xi_vals), cfg, base_seed, k, path_offset=path_offset + done)
            frac = float(np.mean(batch.lifetimes <= horizon))
            if frac > 0:
                raise ExplosionBeforeHorizonError(frac)
            fv = np.asarray(f(batch.terminal_segments()), dtype=float)
        s += fv.sum()
        s2 += (fv**2).sum()
        done += k
    mean = s / n
    var = max(s2 / n - mean**2, 0.0)
    return mean, math.sqrt(var / n), s2 / n


def estimate_P(
    m,
    nu: DelayMeasure,
    f,
    xi_vals: np.ndarray,
    horizon: float,
    h: float,
    n: int,
    base_seed: int,
    chunk: int = 8192,
    tag: str = "direct",
) -> EstimateReport:
    """Sample mean of f at the horizon segment started from xi.

    Accepts a plain model (xi in original coordinates) or a transformed model
    (xi in transformed coordinates); any path dying before the horizon is an
    error that reports the affected fraction.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    mean, se, _ = _terminal_values(m, nu, xi_vals, f, horizon, h, base_seed, n, chunk)
    return EstimateReport(float(mean), float(se), n, tag, {"horizon": horizon, "h": h})


@dataclass
class HarnackReport:
    lhs: float  # E_Q log f at the terminal segment, from eta
    lhs_stderr: float
    log_pf: float  # log of the mean of f from xi
    log_pf_stderr: float
    entropy: float  # E_Q log R
    entropy_stderr: float
    rhs: float
    margin_sigma: float  # (rhs - lhs) / combined stderr, +inf if exact
    verdict: str  # pass / fail / inconclusive
    coupled_fraction: float
    jensen_ok: bool
    mean_R: float
    stderr_R: float
    fitted_rhs: float | None
    setting: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"


def check_log_harnack(
    tm: TransformedModel,
    nu: DelayMeasure,
    f,
    xi_t: np.ndarray,
    eta_t: np.ndarray,
    T: float,
    h: float,
    K: float,
    n: int,
    base_seed: int,
    C_fitted: float | None = None,
) -> HarnackReport:
    """Exact-chain check of P log f(eta) <= log P f(xi) + E_Q log R at 3 sigma.

    One coupling batch provides everything: the X sample estimates P f(xi),
    the weighted X sample estimates the left side, and the weights give the
    entropy cost.  f must be strictly positive.
    """
    cc = CouplingConfig(T=T, h=h, K=K)
    res = run_coupling_batch(tm, nu, xi_t, eta_t, cc, base_seed, n)
    n0 = grid_count(nu.r0, h, "r0")
    term = res.x_states[:, -n0 - 1 :]
    fv = np.asarray(f(term), dtype=float)
    if np.any(fv <= 0):
        raise ValueError("log-Harnack check needs a strictly positive f")
    logf = np.log(fv)
    r = res.R
    mean_r = float(r.mean())
    # self-normalized E_Q[log f(X_{T+r0})]; valid because X = Y there under Q
    lhs = float((r * logf).sum() / r.sum())
    resid = r * (logf - lhs)
    lhs_se = float(resid.std(ddof=1) / (mean_r * math.sqrt(n)))
    pf = float(fv.mean())
    pf_se = float(fv.std(ddof=1) / math.sqrt(n))
    log_pf = math.log(pf)
    log_pf_se = pf_se / pf
    ent = entropy_cost(res)
    rhs = log_pf + ent.value
    sigma = math.sqrt(lhs_se**2 + log_pf_se**2 + ent.stderr**2)
    if ent.warnings:
        verdict = "inconclusive"
    elif lhs <= rhs + 3.0 * sigma:
        verdict = "pass"
    else:
        verdict = "fail"
    jensen_ok = bool(logf.mean() <= math.log(fv.mean()) + 1e-12)
    fitted = None
    if C_fitted is not None:
        d0 = float(np.linalg.norm(np.asarray(xi_t)[-1] - np.asarray(eta_t)[-1]))
        dseg = float(batch_seg_norm(nu, (np.asarray(xi_t) - np.asarray(eta_t))[None])[0])
        fitted = log_pf + C_fitted * (d0**2 / T + dseg**2)
    return HarnackReport(
        lhs=lhs, lhs_stderr=lhs_se, log_pf=log_pf, log_pf_stderr=log_pf_se,
        entropy=ent.value, entropy_stderr=ent.stderr, rhs=rhs,
        margin_sigma=float((rhs - lhs) / sigma) if sigma > 0 else math.inf,
        verdict=verdict,
        coupled_fraction=float(res.coupled.mean()),
        jensen_ok=jensen_ok, mean_R=ent.mean_R, stderr_R=ent.stderr_R,
        fitted_rhs=fitted,
        setting={"T": T, "h": h, "K": K, "n": n},
    )


@dataclass
class GradientReport:
    D: float  # finite-difference directional derivative of P f
    D_stderr: float
    V: float  # P f^2 - (P f)^2
    V_stderr: float
    ratio: float  # D^2 (T and 1) / V
    C_hat: float | None
    passed: bool | None  # None when no fitted constant was supplied
    eps_fd: float
    setting: dict = field(default_factory=dict)


def check_gradient_estimate(
    m,
    nu: DelayMeasure,
    f,
    xi_vals: np.ndarray,
    direction: np.ndarray,
    T: float,
    h: float,
    eps_fd: float,
    n: int,
    base_seed: int,
    C_hat: float | None = None,
    chunk: int = 8192,
) -> GradientReport:
    """Directional derivative of P_{T+r0} f by central differences with common
    random numbers, against the variance form of the gradient estimate."""
    if not 1e-3 <= eps_fd <= 1e-1:
        raise ValueError("eps_fd must lie in [1e-3, 1e-1]")
    direction = np.asarray(direction, dtype=float)
    nrm = float(batch_seg_norm(nu, direction[None])[0])
    if abs(nrm - 1.0) > 1e-9:
        raise ValueError("direction must be normalized in the segment norm")
    horizon = T + nu.r0
    n0 = grid_count(nu.r0, h, "r0")
    steps = grid_count(horizon, h, "horizon")
    dbar = m.model.dbar if isinstance(m, TransformedModel) else m.dbar
    s_d = s_d2 = s_f = s_f2 = 0.0
    done = 0
    cfg = SolverConfig(h=h, t_end=horizon)
    while done < n:
        k = min(chunk, n - done)
        dW = batch_increments(base_seed, done, k, steps, dbar, h)

        def run(start):
            if isinstance(m, TransformedModel):
                states, _ = simulate_transformed(m, nu, start, cfg, base_seed, k, dW=dW)
                return np.asarray(f(states[:, -n0 - 1 :]), dtype=float)
            batch = simulate(m, nu, Segment(start), cfg, base_seed, k, dW=dW)
            return np.asarray(f(batch.terminal_segments()), dtype=float)

        fp = run(xi_vals + eps_fd * direction)
        fm = run(xi_vals - eps_fd * direction)
        f0 = run(xi_vals)
        diff = (fp - fm) / (2.0 * eps_fd)
        s_d += diff.sum()
        s_d2 += (diff**2).sum()
        s_f += f0.sum()
        s_f2 += (f0**2).sum()
        done += k
    D = s_d / n
    D_se = math.sqrt(max(s_d2 / n - D**2, 0.0) / n)
    pf = s_f / n
    pf2 = s_f2 / n
    V = max(pf2 - pf**2, 0.0)
    # stderr of the variance via the fourth-moment-free normal approximation
    V_se = V * math.sqrt(2.0 / max(n - 1, 1))
    if V < 1e-12 and abs(D) > 1e-6:
        raise RuntimeError("variance at numerical floor while the derivative is not")
    tcap = min(T, 1.0)
    ratio = D**2 * tcap / V if V > 0 else math.inf
    passed = None
    if C_hat is not None:
        slack = 3.0 * math.sqrt(
            (2.0 * D_se / max(abs(D), 1e-300)) ** 2 + (V_se / max(V, 1e-300)) ** 2
        )
        passed = bool(D**2 <= (C_hat / tcap) * V * (1.0 + slack))
    return GradientReport(
        D=float(D), D_stderr=float(D_se), V=float(V), V_stderr=float(V_se),
        ratio=float(ratio), C_hat=C_hat, passed=passed, eps_fd=eps_fd,
        setting={"T": T, "h": h, "n": n},
    )
