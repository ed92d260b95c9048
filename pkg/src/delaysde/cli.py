"""Batch experiment runner: INI configs, deterministic seeding, CSV/JSON output.

Path work is decomposed into fixed-size chunks keyed by path index, so the
emitted bytes do not depend on the worker count; reruns with the same config
and seed are byte-identical.

Exit codes: 0 all asserted properties pass, 1 any failure, 2 inconclusive
(degenerate weights or coverage problems), 3 config error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import multiprocessing
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .coupling import CouplingConfig, entropy_cost, run_coupling_batch
from .girsanov import direct_estimate, weak_estimate
from .harnack import check_gradient_estimate, check_log_harnack
from .measure import (
    GridMismatchError,
    Segment,
    check_shift_domination,
    constant_segment,
    grid_count,
    make_measure,
)
from .model import dini_check, make_functional, make_model, validate_assumptions
from .solver import SolverConfig, apriori_check, simulate
from .zvonkin import solve_u, transformed_model, verify_decay

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "run", "main"]

SCENARIOS = (
    "simulate", "validate", "girsanov-check", "couple",
    "harnack", "gradient", "zvonkin", "bihari",
)
SCHEMA_VERSION = 1
CHUNK = 1024  # fixed decomposition unit; independent of the worker count

_ALLOWED = {
    "experiment": {"scenario", "n_paths", "base_seed", "output", "format", "workers"},
    "model": {"name", "lam", "beta", "sigma", "d", "x0"},
    "measure": {"kind", "r0", "lam", "density", "weights"},
    "solver": {"h", "t_end", "scheme", "trunc_level"},
    "coupling": {"T", "K", "distance0", "distance_seg", "lam_u"},
    "zvonkin": {"lams", "T", "x_max", "n_x", "n_t"},
    "girsanov": {"functional", "T"},
    "gradient": {"T", "eps_fd", "functional"},
    "bihari": {"T"},
}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"[{field_name}] {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    scenario: str
    n_paths: int
    base_seed: int
    output: str
    format: str
    workers: int
    raw: dict = field(default_factory=dict)  # picklable section -> key -> str


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a flat key=value INI config."""
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys are case-sensitive (T vs t)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError("syntax", str(e)) from e
    raw: dict = {}
    for sec in cp.sections():
        if sec not in _ALLOWED:
            raise ConfigError(sec, f"unknown section; expected one of {sorted(_ALLOWED)}")
        for key in cp[sec]:
            if key not in _ALLOWED[sec]:
                raise ConfigError(
                    f"{sec}.{key}", f"unknown key; allowed: {sorted(_ALLOWED[sec])}"
                )
        raw[sec] = dict(cp[sec])
    exp = raw.get("experiment", {})
    scenario = exp.get("scenario", "")
    if scenario not in SCENARIOS:
        raise ConfigError(
            "experiment.scenario", f"got {scenario!r}; valid scenarios: {', '.join(SCENARIOS)}"
        )
    fmt = exp.get("format", "json")
    if fmt not in ("csv", "json"):
        raise ConfigError("experiment.format", f"got {fmt!r}; expected csv or json")
    try:
        n_paths = int(exp.get("n_paths", "1000"))
        base_seed = int(exp.get("base_seed", "0"))
        workers = int(exp.get("workers", "1"))
    except ValueError as e:
        raise ConfigError("experiment", f"non-integer count: {e}") from e
    if n_paths < 1:
        raise ConfigError("experiment.n_paths", "need n_paths >= 1")
    if workers < 1:
        raise ConfigError("experiment.workers", "need workers >= 1")
    cfg = ExperimentConfig(
        scenario=scenario, n_paths=n_paths, base_seed=base_seed,
        output=exp.get("output", "."), format=fmt, workers=workers, raw=raw,
    )
    _build(cfg)  # surface grid and field errors at parse time
    return cfg


def _getf(raw, sec, key, default=None):
    v = raw.get(sec, {}).get(key)
    if v is None:
        if default is None:
            raise ConfigError(f"{sec}.{key}", "missing required field")
        return default
    try:
        return float(v)
    except ValueError as e:
        raise ConfigError(f"{sec}.{key}", f"not a number: {v!r}") from e


def _build(cfg: ExperimentConfig):
    """(measure, model, solver config, initial segment) from the raw sections."""
    raw = cfg.raw
    r0 = _getf(raw, "measure", "r0", 1.0)
    h = _getf(raw, "solver", "h", 2.0**-8)
    t_end = _getf(raw, "solver", "t_end", 1.0)
    kind = raw.get("measure", {}).get("kind", "exponential")
    try:
        grid_count(r0, h, "measure.r0 / solver.h")
        grid_count(t_end, h, "solver.t_end / solver.h")
        mkw = {}
        if kind == "exponential":
            mkw["lam"] = _getf(raw, "measure", "lam", 1.0)
        elif kind == "uniform":
            mkw["density"] = _getf(raw, "measure", "density", 1.0)
        elif kind == "atoms":
            wtxt = raw.get("measure", {}).get("weights")
            if wtxt is None:
                raise ConfigError("measure.weights", "atoms measure needs explicit weights")
            mkw["weights"] = [float(x) for x in wtxt.split(",")]
        nu = make_measure(kind, r0, h, **mkw)
    except GridMismatchError as e:
        raise ConfigError("grids", str(e)) from e
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError("measure", str(e)) from e
    msec = dict(raw.get("model", {}))
    name = msec.pop("name", "ou")
    x0 = float(msec.pop("x0", "1.0"))
    params = {}
    for k, v in msec.items():
        try:
            params[k] = int(v) if k == "d" else float(v)
        except ValueError as e:
            raise ConfigError(f"model.{k}", f"not a number: {v!r}") from e
    try:
        m = make_model(name, measure=nu, **params)
    except ValueError as e:
        raise ConfigError("model.name", str(e)) from e
    scheme = raw.get("solver", {}).get("scheme", "exponential-euler")
    trunc = _getf(raw, "solver", "trunc_level", math.inf)
    try:
        scfg = SolverConfig(h=h, t_end=t_end, scheme=scheme, trunc_level=trunc)
    except (ValueError, GridMismatchError) as e:
        raise ConfigError("solver", str(e)) from e
    xi = constant_segment(nu, x0, d=m.d)
    return nu, m, scfg, xi


def _fmt(x) -> str:
    return repr(float(x))


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _write_verdict(cfg: ExperimentConfig, verdict: str, metrics: dict):
    os.makedirs(cfg.output, exist_ok=True)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "scenario": cfg.scenario,
        "base_seed": cfg.base_seed,
        "n_paths": cfg.n_paths,
        "verdict": verdict,
        "metrics": _jsonable(metrics),
    }
    path = os.path.join(cfg.output, "verdict.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"{cfg.scenario}: {verdict} ({path})")


def _write_rows(cfg: ExperimentConfig, header: list, rows):
    os.makedirs(cfg.output, exist_ok=True)
    if cfg.format == "csv":
        path = os.path.join(cfg.output, "result.csv")
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(str(v) if isinstance(v, int) else _fmt(v) for v in row) + "\n")
    else:
        path = os.path.join(cfg.output, "result.json")
        with open(path, "w") as fh:
            json.dump(
                {"schema_version": SCHEMA_VERSION, "columns": header,
                 "rows": [[_jsonable(v) for v in row] for row in rows]},
                fh, sort_keys=True, indent=1,
            )
            fh.write("\n")


def _chunks(n: int):
    return [(s, min(CHUNK, n - s)) for s in range(0, n, CHUNK)]


def _sim_chunk(args):
    cfg, start, count = args
    nu, m, scfg, xi = _build(cfg)
    batch = simulate(m, nu, xi, scfg, cfg.base_seed, count, path_offset=start)
    term = batch.states[:, -1]
    sup = np.abs(batch.states).reshape(count, -1).max(axis=1)
    return start, term, batch.lifetimes, sup


def _couple_chunk(args):
    cfg, start, count = args
    nu, m, scfg, xi = _build(cfg)
    tm, cc, xi_t, eta_t = _coupling_setup(cfg, nu, m, scfg, xi)
    res = run_coupling_batch(tm, nu, xi_t, eta_t, cc, cfg.base_seed, count, path_offset=start)
    return start, res.tau, res.log_R, res.terminal_segments_equal()


def _pool_map(cfg: ExperimentConfig, fn, args_list):
    if cfg.workers == 1:
        return [fn(a) for a in args_list]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(cfg.workers) as pool:
        return pool.map(fn, args_list)


def _needs_transform(m) -> bool:
    probe = np.array([[0.25], [2.0]]) if m.d == 1 else np.zeros((2, m.d)) + 0.25
    return bool(np.any(m.b(0.0, probe) != 0.0))


def _coupling_setup(cfg, nu, m, scfg, xi):
    raw = cfg.raw
    T = _getf(raw, "coupling", "T", 1.0)
    K = _getf(raw, "coupling", "K", 1.0)
    d0 = _getf(raw, "coupling", "distance0", 0.1)
    dseg = _getf(raw, "coupling", "distance_seg", 0.0)
    grid_count(T, scfg.h, "coupling.T / solver.h")
    if _needs_transform(m):
        lam_u = _getf(raw, "coupling", "lam_u", 16.0)
        sol = solve_u(m, lam_u, T + nu.r0)
        tm = transformed_model(m, nu, sol)
    else:
        tm = transformed_model(m, nu, None)
    eta_vals = xi.values.copy()
    eta_vals += dseg
    eta_vals[-1] += d0
    xi_t = tm.seg_to_transformed(0.0, xi.values[None], nu.h)[0]
    eta_t = tm.seg_to_transformed(0.0, eta_vals[None], nu.h)[0]
    return tm, CouplingConfig(T=T, h=scfg.h, K=K), xi_t, eta_t


# ---------------------------------------------------------------------------
# scenario handlers

def _run_simulate(cfg, nu, m, scfg, xi) -> int:
    parts = _pool_map(cfg, _sim_chunk, [(cfg, s, c) for s, c in _chunks(cfg.n_paths)])
    rows = []
    term_all = []
    for start, term, lifetimes, sup in parts:
        term_all.append(term)
        for i in range(term.shape[0]):
            lt = lifetimes[i]
            rows.append(
                [start + i, *[float(v) for v in term[i]],
                 float("nan") if np.isnan(lt) else float(lt), float(sup[i])]
            )
    header = ["path", *[f"x{j}" for j in range(m.d)], "lifetime", "sup_norm"]
    _write_rows(cfg, header, rows)
    term_all = np.concatenate(term_all)
    _write_verdict(cfg, "pass", {
        "terminal_mean": term_all.mean(axis=0),
        "terminal_var": term_all.var(axis=0),
        "explosion_fraction": float(np.mean([not math.isnan(r[-2]) for r in rows])),
    })
    return 0

def _run_validate(cfg, nu, m, scfg, xi) -> int:
    shift = check_shift_domination(nu, scfg.t_end)
    rep = validate_assumptions(m, nu, scfg.t_end, n_samples=max(1000, cfg.n_paths), seed=cfg.base_seed)
    dini = dini_check(m.phi) if m.phi is not None else None
    ok = shift.passed and rep.passed and (dini is None or dini.passed)
    _write_verdict(cfg, "pass" if ok else "fail", {
        "shift_domination": {"passed": shift.passed, "worst_ratio": shift.worst_ratio},
        "assumptions": {"a2": rep.a2.passed, "a3": rep.a3.passed, "a4": rep.a4.passed},
        "dini": None if dini is None else {
            "passed": dini.passed, "monotone": dini.monotone,
            "square_concave": dini.square_concave, "convergent": dini.dini_convergent,
        },
    })
    return 0 if ok else 1

def _run_girsanov(cfg, nu, m, scfg, xi) -> int:
    raw = cfg.raw
    T = _getf(raw, "girsanov", "T", scfg.t_end)
    fname = raw.get("girsanov", {}).get("functional", "tanh0")
    f, _pos = make_functional(fname, nu)
    gcfg = SolverConfig(h=scfg.h, t_end=T, scheme=scfg.scheme)
    direct, d_se = direct_estimate(m, nu, xi, f, T, gcfg, cfg.base_seed, cfg.n_paths)
    west = weak_estimate(m, nu, xi, f, T, gcfg, cfg.base_seed + 1, cfg.n_paths)
    comb = math.sqrt(d_se**2 + west.stderr**2)
    agree = abs(direct - west.unnormalized) <= 3.0 * comb
    mart = abs(west.mean_R - 1.0) <= 3.0 * west.stderr_R
    inconclusive = bool(west.warnings)
    verdict = "inconclusive" if inconclusive else ("pass" if agree and mart else "fail")
    _write_verdict(cfg, verdict, {
        "direct": direct, "direct_stderr": d_se,
        "reweighted": west.unnormalized, "reweighted_stderr": west.stderr,
        "self_normalized": west.self_normalized,
        "mean_R": west.mean_R, "stderr_R": west.stderr_R, "ess": west.ess,
    })
    return 2 if inconclusive else (0 if agree and mart else 1)

def _run_couple(cfg, nu, m, scfg, xi) -> int:
    parts = _pool_map(cfg, _couple_chunk, [(cfg, s, c) for s, c in _chunks(cfg.n_paths)])
    tau = np.concatenate([p[1] for p in parts])
    log_r = np.concatenate([p[2] for p in parts])
    equal = np.concatenate([p[3] for p in parts])
    rows = [
        [i, float("nan") if np.isnan(tau[i]) else float(tau[i]), float(log_r[i]), int(equal[i])]
        for i in range(len(tau))
    ]
    _write_rows(cfg, ["path", "tau", "log_R", "terminal_equal"], rows)
    r = np.exp(log_r)
    n = len(r)
    mean_r = float(r.mean())
    se_r = float(r.std(ddof=1) / math.sqrt(n))
    ess = float(r.sum() ** 2 / (r**2).sum())
    frac = float((~np.isnan(tau)).mean())
    mart = abs(mean_r - 1.0) <= 3.0 * se_r
    inconclusive = ess < 0.01 * n
    verdict = "inconclusive" if inconclusive else ("pass" if mart else "fail")
    _write_verdict(cfg, verdict, {
        "coupled_fraction": frac, "mean_R": mean_r, "stderr_R": se_r, "ess": ess,
        "entropy_selfnorm": float((r * log_r).sum() / r.sum()),
    })
    return 2 if inconclusive else (0 if mart else 1)

def _run_harnack(cfg, nu, m, scfg, xi) -> int:
    tm, cc, xi_t, eta_t = _coupling_setup(cfg, nu, m, scfg, xi)
    f, pos = make_functional("tanh0_pos", nu)
    rep = check_log_harnack(
        tm, nu, f, xi_t, eta_t, cc.T, cc.h, cc.K, cfg.n_paths, cfg.base_seed
    )
    if np.array_equal(xi_t, eta_t):
        verdict = "pass" if rep.jensen_ok else "fail"
    else:
        verdict = rep.verdict
    _write_verdict(cfg, verdict, {
        "lhs": rep.lhs, "rhs": rep.rhs, "margin_sigma": rep.margin_sigma,
        "entropy": rep.entropy, "coupled_fraction": rep.coupled_fraction,
        "jensen_ok": rep.jensen_ok, "mean_R": rep.mean_R,
    })
    return {"pass": 0, "fail": 1, "inconclusive": 2}[verdict]

def _run_gradient(cfg, nu, m, scfg, xi) -> int:
    raw = cfg.raw
    T = _getf(raw, "gradient", "T", 1.0)
    eps = _getf(raw, "gradient", "eps_fd", 0.01)
    fname = raw.get("gradient", {}).get("functional", "coord0")
    f, _pos = make_functional(fname, nu)
    direction = np.zeros((nu.n_cells + 1, m.d))
    direction[-1, 0] = 1.0
    rep = check_gradient_estimate(
        m, nu, f, xi.values, direction, T, scfg.h, eps, cfg.n_paths, cfg.base_seed
    )
    metrics = {"D": rep.D, "D_stderr": rep.D_stderr, "V": rep.V, "ratio": rep.ratio}
    if m.name == "ou" and fname == "coord0":
        lam = m.params["lam"]
        oracle = math.exp(-lam * (T + nu.r0))
        ok = abs(rep.D - oracle) <= 2.0 * eps**2 + 3.0 * rep.D_stderr
        metrics["oracle"] = oracle
        verdict = "pass" if ok else "fail"
    else:
        verdict = "pass"
    _write_verdict(cfg, verdict, metrics)
    return 0 if verdict == "pass" else 1

def _run_zvonkin(cfg, nu, m, scfg, xi) -> int:
    raw = cfg.raw
    T = _getf(raw, "zvonkin", "T", 1.0)
    lams = [float(x) for x in raw.get("zvonkin", {}).get("lams", "2,4,8,16,32").split(",")]
    kw = {}
    for key in ("x_max", "n_x", "n_t"):
        if key in raw.get("zvonkin", {}):
            v = _getf(raw, "zvonkin", key)
            kw[key] = int(v) if key in ("n_x", "n_t") else v
    rep = verify_decay(m, lams, T, **kw)
    ok = rep.monotone and rep.lam_star is not None
    _write_verdict(cfg, "pass" if ok else "fail", {
        "lams": rep.lams, "u_sup": rep.u_sups, "du_sup": rep.du_sups,
        "d2u_sup": rep.d2u_sups, "lam_star": rep.lam_star, "monotone": rep.monotone,
    })
    return 0 if ok else 1

def _run_bihari(cfg, nu, m, scfg, xi) -> int:
    T = _getf(cfg.raw, "bihari", "T", scfg.t_end)
    rep = apriori_check(m, nu, xi, scfg, T, cfg.n_paths, cfg.base_seed)
    ok = rep.pass_fraction >= 0.999
    _write_verdict(cfg, "pass" if ok else "fail", {
        "pass_fraction": rep.pass_fraction, "K1": rep.K1, "K2": rep.K2,
        "alpha_mean": rep.alpha_mean, "worst_margin": rep.worst_margin,
    })
    return 0 if ok else 1


_HANDLERS = {
    "simulate": _run_simulate,
    "validate": _run_validate,
    "girsanov-check": _run_girsanov,
    "couple": _run_couple,
    "harnack": _run_harnack,
    "gradient": _run_gradient,
    "zvonkin": _run_zvonkin,
    "bihari": _run_bihari,
}


def run(cfg: ExperimentConfig) -> int:
    nu, m, scfg, xi = _build(cfg)
    return _HANDLERS[cfg.scenario](cfg, nu, m, scfg, xi)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="delaysde", description=__doc__)
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--workers", type=int)
    args = p.parse_args(argv)
    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3
    try:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_string(text)
        if not cp.has_section("experiment"):
            cp.add_section("experiment")
        cp.set("experiment", "scenario", args.scenario)
        if args.seed is not None:
            cp.set("experiment", "base_seed", str(args.seed))
        if args.paths is not None:
            cp.set("experiment", "n_paths", str(args.paths))
        if args.out is not None:
            cp.set("experiment", "output", args.out)
        if args.format is not None:
            cp.set("experiment", "format", args.format)
        if args.workers is not None:
            cp.set("experiment", "workers", str(args.workers))
        if args.step is not None:
            if not cp.has_section("solver"):
                cp.add_section("solver")
            cp.set("solver", "h", repr(args.step))
        buf = []
        for sec in cp.sections():
            buf.append(f"[{sec}]")
            buf.extend(f"{k} = {v}" for k, v in cp[sec].items())
        cfg = parse_config("\n".join(buf))
    except (ConfigError, configparser.Error) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3
    try:
        return run(cfg)
    except (ConfigError, GridMismatchError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
