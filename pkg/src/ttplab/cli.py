"""Command-line entry point: ``ttplab <command> --config run.json --out DIR``.

Exit codes: 0 success, 1 failed invariant checks, 2 configuration/usage
error, 3 numerical failure (an ``error.json`` is written to the output
directory for 2 and 3).  Numeric outputs depend only on the config and the
seed; the manifest records a sha256 of the effective config and of every
output file.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checks import run_checks
from .ensemble import EnsembleConfig, evolve_ensemble, hre_variance_check
from .errors import ConfigurationError, DomainError, InvalidInitialCondition, TTPLabError
from .fields import Box, residual_sweep, scenario_from_dict, scenario_to_dict
from .kinetics import gaussian_entropy, init_p0_state, quadrature_grid, write_ledger_csv
from .stochastic import (
    StochasticModel,
    TTPSpec,
    bundle_snapshots,
    entropy_inequality_check,
    kramers_moyal,
    langevin_run,
    ordering_report,
)
from .ttp import TTPBatch, TTPState, init_ttp, integrate_batch, orthonormal_frame
from .kinetics import kinetic_fields
from .fields import eval_sample

log = logging.getLogger("ttplab")

COMMANDS = ("simulate", "ensemble", "stochastic", "residuals", "p0-solve", "check")
USAGE_ERRORS = (ConfigurationError, DomainError, InvalidInitialCondition)

# allowed top-level keys per command (besides the common ones)
_COMMON = {"command", "scenario", "seed", "quadrature_order", "p0"}
_KEYS = {
    "simulate": {"dt", "t1", "ttps", "random_ttps", "project", "record_every", "backend"},
    "ensemble": {"dt", "t1", "ensemble", "snapshot_every", "hre_samples"},
    "stochastic": {"dt", "t1", "model", "m_alpha", "mode", "order", "ttp", "n_max", "entropy"},
    "residuals": {"n_space", "n_time"},
    "p0-solve": {"t0"},
    "check": {"checks"},
}


# ---------------------------------------------------------------------------
# helpers


def _require(cfg: dict, key: str, kind=None):
    if key not in cfg:
        raise ConfigurationError(f"missing required config key {key!r}")
    value = cfg[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigurationError(f"config key {key!r} has the wrong type")
    return value


def _positive(cfg: dict, key: str, default=None) -> float:
    value = cfg.get(key, default)
    if value is None:
        raise ConfigurationError(f"missing required config key {key!r}")
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise ConfigurationError(f"{key!r} must be a positive number")
    return float(value)


def _steps(t0: float, t1: float, dt: float) -> int:
    if not t1 > t0:
        raise ConfigurationError("t1 must exceed t0")
    n = int(round((t1 - t0) / dt))
    if abs(n * dt - (t1 - t0)) > 1e-9 * max(1.0, abs(t1)):
        raise ConfigurationError("t1 - t0 must be a multiple of dt")
    return n


def _scenario(cfg: dict):
    doc = _require(cfg, "scenario")
    if isinstance(doc, str):
        doc = {"id": doc}
    return scenario_from_dict(doc)


def _grid(cfg, scenario):
    order = cfg.get("quadrature_order", 16)
    if not isinstance(order, int) or order < 1:
        raise ConfigurationError("quadrature_order must be a positive integer")
    return quadrature_grid(scenario, order)


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ---------------------------------------------------------------------------
# commands


def _ttp_states(cfg, scenario, p0, t0, seed):
    states = []
    for i, spec in enumerate(cfg.get("ttps", [])):
        if not isinstance(spec, dict) or "r0" not in spec:
            raise ConfigurationError(f"ttps[{i}] needs 'r0'")
        if "u0" in spec:
            states.append(init_ttp(spec["r0"], spec["u0"], t0, p0, scenario))
        else:
            states.append(TTPSpec(tuple(spec["r0"]), float(spec.get("beta", 1.0)), float(spec.get("phi", 0.0)),
                                  t0).state(scenario, p0))
    rnd = cfg.get("random_ttps")
    if rnd is not None:
        n = int(_require(rnd, "n"))
        region = rnd.get("region")
        box = Box(tuple(region["min"]), tuple(region["max"])) if region else scenario.domain
        lo, hi = np.asarray(box.lo), np.asarray(box.hi)
        beta_lo, beta_hi = rnd.get("beta_range", [0.1, 2.0])
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(5,)))
        r = lo + (hi - lo) * rng.random((n, 3))
        phi = rng.uniform(0.0, 2 * math.pi, n)
        beta = rng.uniform(beta_lo, beta_hi, n)
        kf = kinetic_fields(eval_sample(scenario, r, t0), p0, scenario)
        e1, e2 = orthonormal_frame(kf.b)
        nv = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
        states += [TTPState(r[i], nv[i], float(beta[i]), t0, tangency_defect=float(np.dot(nv[i], kf.b[i])))
                   for i in range(n)]
    if not states:
        raise ConfigurationError("simulate needs 'ttps' or 'random_ttps'")
    return states


def cmd_simulate(cfg, out: Path, seed: int, threads: int, plot: bool) -> dict:
    scenario = _scenario(cfg)
    grid = _grid(cfg, scenario)
    dt = _positive(cfg, "dt")
    t0 = scenario.t_span[0]
    n_steps = _steps(t0, float(_require(cfg, "t1")), dt)
    state = init_p0_state(scenario, t0, grid, p0=cfg.get("p0"))
    states = _ttp_states(cfg, scenario, state.p0, t0, seed)
    record_every = int(cfg.get("record_every", max(1, n_steps // 100)))
    res = integrate_batch(TTPBatch.from_states(states), scenario, state, n_steps, dt, grid,
                          project=bool(cfg.get("project", True)), record_every=record_every,
                          backend=cfg.get("backend"), threads=threads)
    tdir = out / "trajectories"
    tdir.mkdir(exist_ok=True)
    for i, tr in enumerate(res.trajectories):
        tr.write_csv(tdir / f"ttp_{i:05d}.csv")
    write_ledger_csv(res.p0_state, out / "p0_ledger.csv")
    summary = {
        "n_ttps": len(states), "n_steps": n_steps, "dt": dt, "p0_final": res.p0_state.p0,
        "status": res.batch.status.tolist(),
        "max_beta_drift": float(res.max_beta_drift.max()),
        "max_tangency_defect": float(res.max_tangency_defect.max()),
        "max_post_projection_defect": float(res.max_post_projection_defect.max()),
        "max_norm_defect": float(res.max_norm_defect.max()),
        "degenerate_steps": res.degenerate_steps.tolist(),
    }
    _write_json(out / "summary.json", summary)
    if plot:
        _write_rows(out / "plot" / "final_state.csv", ("ttp", "r.x", "r.y", "r.z", "beta", "max_beta_drift"),
                    [(i, *res.batch.r[i], res.batch.beta[i], res.max_beta_drift[i]) for i in range(len(states))])
    return {"max_beta_drift": summary["max_beta_drift"], "p0_final": res.p0_state.p0}


def cmd_ensemble(cfg, out: Path, seed: int, threads: int, plot: bool) -> dict:
    scenario = _scenario(cfg)
    grid = _grid(cfg, scenario)
    ens = _require(cfg, "ensemble", dict)
    unknown = set(ens) - {"n_particles", "n_spawn_points", "spawn_region", "t0"}
    if unknown:
        raise ConfigurationError(f"unknown ensemble keys {sorted(unknown)}")
    region = ens.get("spawn_region")
    config = EnsembleConfig(
        n_particles=int(_require(ens, "n_particles")), seed=seed,
        spawn_region=Box(tuple(region["min"]), tuple(region["max"])) if region else None,
        t0=float(ens.get("t0", scenario.t_span[0])), n_spawn_points=int(ens.get("n_spawn_points", 1)),
    )
    dt = _positive(cfg, "dt")
    t1 = float(cfg.get("t1", config.t0))
    state = init_p0_state(scenario, config.t0, grid, p0=cfg.get("p0"))
    result = evolve_ensemble(config, scenario, state, t1, dt, grid, snapshot_every=int(cfg.get("snapshot_every", 0)),
                             threads=threads)
    summary = result.summary()
    if cfg.get("hre_samples"):
        c = hre_variance_check(scenario, result.points[0], config.t0, state.p0, int(cfg["hre_samples"]), seed)
        summary["hre_variance"] = {"lhs": c.lhs, "rhs": c.rhs, "stderr": c.stderr, "n_samples": c.n_samples}
    _write_json(out / "ensemble.json", summary)
    write_ledger_csv(result.p0_state, out / "p0_ledger.csv")
    if plot:
        rows = []
        for snap in result.snapshots:
            for k, m in enumerate(snap.moments):
                if m is not None:
                    rows.append((snap.t, k, *m.V_hat, m.p1_hat, m.stderr["p1"], m.n_samples))
        _write_rows(out / "plot" / "snapshots.csv", ("t", "point", "V.x", "V.y", "V.z", "p1_ratio", "p1_stderr", "n"),
                    rows)
    return {"failures": result.failures}


def cmd_stochastic(cfg, out: Path, seed: int, threads: int, plot: bool) -> dict:
    scenario = _scenario(cfg)
    grid = _grid(cfg, scenario)
    model = StochasticModel.from_dict(_require(cfg, "model", dict))
    ttp = _require(cfg, "ttp", dict)
    t0 = scenario.t_span[0]
    spec = TTPSpec(tuple(_require(ttp, "r0")), float(ttp.get("beta", 1.0)), float(ttp.get("phi", 0.0)), t0)
    dt = _positive(cfg, "dt")
    t1 = float(_require(cfg, "t1"))
    _steps(t0, t1, dt)
    mode = cfg.get("mode", "mc")
    bundle = langevin_run(scenario, spec, model, cfg.get("m_alpha"), t1, dt, seed=seed, grid=grid, mode=mode,
                          order=int(cfg.get("order", 8)), p0=cfg.get("p0"), threads=threads)
    _write_json(out / "bundle.json", bundle.summary())
    snap = bundle_snapshots(bundle)
    km = kramers_moyal(snap, int(cfg.get("n_max", 3)))
    km.write_json(out / "km.json")
    report = ordering_report(snap)
    _write_json(out / "ordering.json", report.to_dict())
    result = {"success_fraction": bundle.success_fraction, "zeta_p": report.zeta_p}
    if cfg.get("entropy", True):
        p0s = None if cfg.get("p0") is None else [cfg["p0"]] * len(bundle.members)
        e = entropy_inequality_check(scenario, model, t0, grid, m_alpha=cfg.get("m_alpha"), seed=seed, mode=mode,
                                     order=int(cfg.get("order", 8)), p0s=p0s)
        _write_json(out / "entropy.json", e.to_dict())
        result["entropy_gap"] = e.gap
    if plot:
        rows = []
        for key, val in sorted(km.entries.items()):
            err = km.stderr[key]
            for idx in np.ndindex(val.shape):
                rows.append((*key, ";".join(map(str, idx)), val[idx], err[idx]))
        _write_rows(out / "plot" / "km.csv", ("i", "j", "k", "index", "value", "stderr"), rows)
        _write_rows(out / "plot" / "alpha.csv", ("member", *[f"alpha_{i}" for i in range(model.k)], "rho", "p1"),
                    [(m, *snap.alphas[m], snap.rho[m], snap.p1[m]) for m in range(len(snap.rho))])
    return result


def cmd_residuals(cfg, out: Path, seed: int, threads: int, plot: bool) -> dict:
    scenario = _scenario(cfg)
    worst = residual_sweep(scenario, int(cfg.get("n_space", 5)), int(cfg.get("n_time", 5)))
    _write_json(out / "residuals.json", {"scenario": scenario_to_dict(scenario), "max_abs": worst})
    return {"max_residual": max(worst.values())}


def cmd_p0_solve(cfg, out: Path, seed: int, threads: int, plot: bool) -> dict:
    scenario = _scenario(cfg)
    grid = _grid(cfg, scenario)
    t0 = float(cfg.get("t0", scenario.t_span[0]))
    state = init_p0_state(scenario, t0, grid, p0=cfg.get("p0"))
    S = gaussian_entropy(scenario, state.p0, t0, grid)
    _write_json(out / "p0.json", {"t0": t0, "p0": state.p0, "S_fM": S, "dp0_dt": state.dp0_dt,
                                  "dS_T_dt": state.dS_T_dt})
    return {"p0": state.p0, "S_fM": S}


def cmd_check(cfg, out: Path, seed: int, threads: int, plot: bool) -> dict:
    names = cfg.get("checks")
    results = run_checks(seed, names)
    passed = sum(r.passed for r in results)
    _write_json(out / "check.json", {"passed": passed, "failed": len(results) - passed,
                                     "results": [r.to_dict() for r in results]})
    return {"passed": passed, "failed": len(results) - passed}


HANDLERS = {
    "simulate": cmd_simulate, "ensemble": cmd_ensemble, "stochastic": cmd_stochastic,
    "residuals": cmd_residuals, "p0-solve": cmd_p0_solve, "check": cmd_check,
}


# ---------------------------------------------------------------------------
# driver


def load_config(path: str | None, command: str) -> dict:
    if path is None:
        cfg = {}
    else:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a JSON object")
    if cfg.get("command", command) != command:
        raise ConfigurationError(f"config is for command {cfg['command']!r}, not {command!r}")
    unknown = set(cfg) - _COMMON - _KEYS[command]
    if unknown:
        raise ConfigurationError(f"unknown config keys for {command}: {sorted(unknown)}")
    return cfg


def _resolve_threads(arg: int | None) -> int:
    if arg is None:
        env = os.environ.get("TTPLAB_THREADS")
        try:
            arg = int(env) if env else 1
        except ValueError as exc:
            raise ConfigurationError("TTPLAB_THREADS must be an integer") from exc
    if arg < 1:
        raise ConfigurationError("--threads must be >= 1")
    return arg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttplab", description="Thermal tracer particle laboratory")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="64-bit seed (overrides the config)")
    p.add_argument("--threads", type=int, help="worker threads (default: $TTPLAB_THREADS or 1)")
    p.add_argument("--out", default="ttplab-out", help="output directory")
    p.add_argument("--emit-plot-data", action="store_true", help="also write columnar CSVs under OUT/plot")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise ConfigurationError(f"output directory {out} is not writable")
    except OSError as exc:
        print(f"ttplab: cannot create output directory: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, args.command)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        cfg = {**cfg, "command": args.command, "seed": seed}
        threads = _resolve_threads(args.threads)
        if args.emit_plot_data:
            (out / "plot").mkdir(exist_ok=True)
        log.info("running %s with %d thread(s)", args.command, threads)
        results = HANDLERS[args.command](cfg, out, seed, threads, args.emit_plot_data)
    except USAGE_ERRORS as exc:
        _write_json(out / "error.json", {"kind": "usage", "type": type(exc).__name__, "message": str(exc)})
        print(f"ttplab: configuration error: {exc}", file=sys.stderr)
        return 2
    except (TTPLabError, ArithmeticError, np.linalg.LinAlgError) as exc:
        _write_json(out / "error.json", {"kind": "numerical", "type": type(exc).__name__, "message": str(exc)})
        print(f"ttplab: numerical failure: {exc}", file=sys.stderr)
        return 3
    outputs = sorted(p for p in out.rglob("*") if p.is_file() and p.name not in ("manifest.json", "error.json"))
    manifest = {
        "version": __version__, "command": args.command, "seed": seed, "config": cfg,
        "config_sha256": config_hash(cfg), "results": results,
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in outputs},
    }
    _write_json(out / "manifest.json", manifest)
    if args.command == "check" and results["failed"]:
        return 1
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))
