"""Command line runner: ``lnflow run <config.json>``, ``lnflow list``, ``lnflow plots <dir>``."""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .discretization import build_mesh
from .elliptic import (SolverError, exact_ball_ln, first_dirichlet_eigenpair,
                       largest_homogeneous_solution, loewner_nirenberg_reference,
                       solve_yamabe_dirichlet)
from .experiments import REGISTRY, list_experiments, run_experiment
from .flows import MONITORS, FlowAbort, FlowConfig, _jsonable, hamilton_tracker, run_flow
from .functionals import escobar_Q, flatten_scalar, positivize_scalar, q_blowup_probe, q_probe_csv
from .geometry import Geometry, lambda1_closed_form
from .schedules import FAMILIES, Profile, Schedule

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
TASKS = ("solve-ln", "run-flow", "eigen", "v0", "q-energy", "flatten", "verify-all")


class ConfigError(ValueError):
    pass


# -- schema ------------------------------------------------------------------------------------

GEOMETRY_DEFAULTS = {
    "ball": {"kind": "ball", "n": 3, "radius": 1.0, "warp": "euclidean"},
    "annulus": {"kind": "annulus", "n": 3, "inner": 0.5, "outer": 1.0, "warp": "euclidean"},
    "slab": {"kind": "slab", "n": 3, "length": 1.0, "kappa": 0.0, "cross_volume": 1.0},
}
MESH_DEFAULTS = {"M": 2000, "grading": "graded", "strength": 7.0}
FLOW_DEFAULTS = {"flow_kind": "direct", "t_end": 30.0, "dt_init": 1e-3, "dt_min": 1e-12,
                 "dt_max": 1.0, "step_rtol": 1e-3, "step_atol": 1e-6, "newton_tol": 1e-11,
                 "monitors": ["monotone", "global_bounds"], "margin": 0.1, "adaptive": True,
                 "normalize": True, "tol_mono": 1e-8, "fail_fast": False}
SCHEDULE_DEFAULTS = {"family": "exp", "c": None, "power": 2.0}
INITIAL_DEFAULTS = {"kind": "dirichlet", "boundary": 0.5, "scale": 0.5}
FLATTEN_DEFAULTS = {"f": 0.01, "augment": False}
TOP_DEFAULTS = {"task": None, "geometry": None, "mesh": None, "flow": None, "schedule": None,
                "initial": None, "flatten": None, "output": "lnflow-out", "seed": 0,
                "workers": 1, "experiments": None}


def _locate(text: str, key: str) -> tuple[int, int]:
    """Line and column (1-based) of the first ``"key":`` in the raw config text."""
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    if m is None:
        return 0, 0
    line = text.count("\n", 0, m.start()) + 1
    col = m.start() - (text.rfind("\n", 0, m.start()) + 1) + 1
    return line, col


def _merge(block: dict | None, defaults: dict, name: str, text: str) -> dict:
    block = {} if block is None else block
    if not isinstance(block, dict):
        line, col = _locate(text, name)
        raise ConfigError(f"line {line}, column {col}: '{name}' must be an object")
    for key in block:
        if key not in defaults:
            line, col = _locate(text, key)
            raise ConfigError(f"line {line}, column {col}: unknown key '{key}' in '{name}'")
    return {**defaults, **block}


def _check(cond: bool, text: str, key: str, message: str) -> None:
    if not cond:
        line, col = _locate(text, key)
        raise ConfigError(f"line {line}, column {col}: {message}")


def load_config(path) -> dict:
    """Parse and validate a config file; the result has every default filled in."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("line 1, column 1: config must be a JSON object")
    cfg = _merge(raw, TOP_DEFAULTS, "config", text)
    _check(cfg["task"] in TASKS, text, "task", f"task must be one of {', '.join(TASKS)}")
    _check(isinstance(cfg["seed"], int), text, "seed", "seed must be an integer")
    _check(isinstance(cfg["workers"], int) and cfg["workers"] >= 1, text, "workers",
           "workers must be a positive integer")
    _check(isinstance(cfg["output"], str), text, "output", "output must be a path string")

    if cfg["task"] == "verify-all":
        names = cfg["experiments"]
        if names is None:
            cfg["experiments"] = list(REGISTRY)
        else:
            _check(isinstance(names, list) and all(n in REGISTRY for n in names), text,
                   "experiments", "experiments must list names shown by 'lnflow list'")
        for key in ("geometry", "mesh", "flow", "schedule", "initial", "flatten"):
            _check(cfg[key] is None, text, key, f"'{key}' does not apply to verify-all")
        return cfg
    _check(cfg["experiments"] is None, text, "experiments",
           "'experiments' only applies to verify-all")

    geo = cfg["geometry"]
    _check(isinstance(geo, dict) and geo.get("kind") in GEOMETRY_DEFAULTS, text,
           "geometry" if not isinstance(geo, dict) or "kind" not in geo else "kind",
           "geometry.kind must be one of ball, annulus, slab")
    cfg["geometry"] = _merge(geo, GEOMETRY_DEFAULTS[geo["kind"]], "geometry", text)
    cfg["mesh"] = _merge(cfg["mesh"], MESH_DEFAULTS, "mesh", text)
    _check(cfg["mesh"]["grading"] in ("uniform", "graded"), text, "grading",
           "grading must be 'uniform' or 'graded'")
    _check(isinstance(cfg["mesh"]["M"], int) and cfg["mesh"]["M"] >= 4, text, "M",
           "M must be an integer >= 4")

    if cfg["task"] == "run-flow":
        cfg["flow"] = _merge(cfg["flow"], FLOW_DEFAULTS, "flow", text)
        bad = [m for m in cfg["flow"]["monitors"] if m not in MONITORS]
        _check(not bad, text, "monitors", f"unknown monitors {bad}")
        cfg["schedule"] = _merge(cfg["schedule"], SCHEDULE_DEFAULTS, "schedule", text)
        _check(cfg["schedule"]["family"] in FAMILIES, text, "family",
               f"family must be one of {', '.join(FAMILIES)}")
        cfg["initial"] = _merge(cfg["initial"], INITIAL_DEFAULTS, "initial", text)
        _check(cfg["initial"]["kind"] in ("dirichlet", "constant"), text, "kind",
               "initial.kind must be 'dirichlet' or 'constant'")
    else:
        for key in ("flow", "schedule", "initial"):
            _check(cfg[key] is None, text, key, f"'{key}' only applies to run-flow")
    if cfg["task"] == "flatten":
        cfg["flatten"] = _merge(cfg["flatten"], FLATTEN_DEFAULTS, "flatten", text)
    else:
        _check(cfg["flatten"] is None, text, "flatten", "'flatten' only applies to flatten")

    try:
        make_geometry(cfg["geometry"])
        if cfg["flow"] is not None:
            make_flow_config(cfg["flow"])
    except (TypeError, ValueError) as exc:
        line, col = _locate(text, "geometry" if cfg["flow"] is None else "flow")
        raise ConfigError(f"line {line}, column {col}: {exc}") from exc
    return cfg


def make_geometry(block: dict) -> Geometry:
    kind = block["kind"]
    if kind == "ball":
        return Geometry.ball(block["n"], block["radius"], block["warp"])
    if kind == "annulus":
        return Geometry.annulus(block["n"], block["inner"], block["outer"], block["warp"])
    return Geometry.slab(block["n"], block["length"], block["kappa"], block["cross_volume"])


def make_flow_config(block: dict) -> FlowConfig:
    return FlowConfig(**{**block, "monitors": tuple(block["monitors"])})


# -- tasks -------------------------------------------------------------------------------------

def _verdict(name: str, ok: bool | None, value, threshold) -> dict:
    status = "skipped" if ok is None else ("pass" if ok else "fail")
    return {"name": name, "status": status, "value": value, "threshold": threshold}


def _setup(cfg: dict):
    geom = make_geometry(cfg["geometry"])
    m = cfg["mesh"]
    return geom, build_mesh(geom, m["M"], m["grading"], m["strength"])


def task_solve_ln(cfg: dict, out: Path) -> dict:
    geom, mesh = _setup(cfg)
    rep = loewner_nirenberg_reference(geom, mesh)
    rep.solution.to_csv(out / "u_ln.csv")
    verdicts = [_verdict("positive", rep.positivity_min > 0, rep.positivity_min, 0.0)]
    if geom.kind == "warped_ball" and geom.warp == "euclidean":
        mask = mesh.nodes <= 0.9 * geom.x_hi
        exact = exact_ball_ln(geom.n, geom.x_hi)(mesh.nodes[mask])
        err = float(np.max(np.abs(rep.solution.values[mask] - exact) / exact))
        verdicts.append(_verdict("ball-ln-exact", err < 5e-3, err, 5e-3))
    return {"result": rep.to_dict(), "verdicts": verdicts}


def _initial_data(cfg: dict, geom, mesh) -> np.ndarray:
    init = cfg["initial"]
    if init["kind"] == "constant":
        return np.full(mesh.size, float(init["boundary"]) * float(init["scale"]))
    sol = solve_yamabe_dirichlet(geom, mesh, init["boundary"]).solution.values
    return float(init["scale"]) * sol


def _eta_table(trace, geom, mesh, margin: float) -> list[tuple[float, float]]:
    if geom.kind == "warped_ball" and geom.warp == "euclidean":
        ref = exact_ball_ln(geom.n, geom.x_hi)(mesh.nodes)
    else:
        ref = loewner_nirenberg_reference(geom, mesh).solution.values
    h = hamilton_tracker(trace, ref, margin)
    return list(zip(h["times"], h["eta"]))


def task_run_flow(cfg: dict, out: Path) -> dict:
    geom, mesh = _setup(cfg)
    fcfg = make_flow_config(cfg["flow"])
    u0 = _initial_data(cfg, geom, mesh)
    sc = cfg["schedule"]
    start = [float(u0[i]) for i in mesh.dirichlet]
    profiles = tuple(Profile(sc["family"], sc["c"] if sc["c"] is not None else s, sc["power"])
                     for s in start)
    sched = Schedule(profiles, tuple(c.name for c in geom.boundary_components))
    trace = run_flow(geom, mesh, u0, sched, fcfg)
    trace.write(out)
    try:
        eta = _eta_table(trace, geom, mesh, fcfg.margin)
    except SolverError:
        eta = []
    if eta:
        rows = ["t,eta"] + [f"{t:.17g},{e:.17g}" for t, e in eta]
        (out / "eta.csv").write_text("\n".join(rows) + "\n")
    verdicts = []
    for name, rep in trace.monitors.items():
        if name == "initial_hypotheses":
            continue
        if "violations" in rep and "pass" not in rep:
            verdicts.append(_verdict(name, rep["violations"] == 0, rep["violations"], 0))
        elif "pass" in rep:
            verdicts.append(_verdict(name, None if rep.get("skipped") else rep["pass"],
                                     rep.get("worst_margin"), 0.0))
    result = {"steps": len(trace.times) - 1, "t_final": trace.times[-1],
              "final_min": float(np.min(trace.physical(-1))),
              "final_max": float(np.max(trace.physical(-1))),
              "monitors": trace.monitors, "warnings": trace.warnings}
    return {"result": result, "verdicts": verdicts}


def task_eigen(cfg: dict, out: Path) -> dict:
    geom, mesh = _setup(cfg)
    lam, phi = first_dirichlet_eigenpair(geom, mesh)
    phi.to_csv(out / "phi1.csv")
    positive = bool(np.all(phi.values[mesh.interior] > 0))
    verdicts = [_verdict("eigenfunction-positive", positive, float(np.min(phi.values[mesh.interior])), 0.0)]
    closed = lambda1_closed_form(geom)
    if closed is not None:
        rel = abs(lam - closed) / abs(closed)
        verdicts.append(_verdict("eigen-oracle", rel < 5e-3, rel, 5e-3))
    return {"result": {"lambda1": float(lam), "closed_form": closed}, "verdicts": verdicts}


def task_v0(cfg: dict, out: Path) -> dict:
    geom, mesh = _setup(cfg)
    rep = largest_homogeneous_solution(geom, mesh)
    rep.solution.to_csv(out / "v0.csv")
    verdicts = [_verdict("decreasing-sequence", rep.extra["decreasing"],
                         rep.extra["worst_increase"], 1e-10)]
    return {"result": rep.to_dict(), "verdicts": verdicts}


def task_q_energy(cfg: dict, out: Path) -> dict:
    geom, mesh = _setup(cfg)
    probe = q_blowup_probe(geom, mesh)
    (out / "q_probe.csv").write_text(q_probe_csv(probe))
    q1 = escobar_Q(geom, mesh, np.ones(mesh.size))
    holds = (probe["lambda1"] > 0) != probe["diverges"]
    result = {"probe": probe, "Q_constant_one": q1.to_dict()}
    return {"result": result, "verdicts": [_verdict("q-dichotomy", holds, probe["min_Q"], None)]}


def task_flatten(cfg: dict, out: Path) -> dict:
    geom, mesh = _setup(cfg)
    opts = cfg["flatten"]
    flat = flatten_scalar(geom, mesh, augment=opts["augment"])
    flat.solution.to_csv(out / "xi.csv")
    rep = positivize_scalar(geom, mesh, opts["f"], background=flat.solution.values)
    rep.solution.to_csv(out / "v.csv")
    dev = rep.extra["R_new_max_deviation"]
    r_min = float(np.min(rep.extra["R_new"][mesh.interior]))
    result = {"lambda1": flat.lambda1, "flatten_residual": flat.residual_sup,
              "augment_constant": flat.augment_constant, "augmented_R_min": flat.augmented_R_min,
              "f": opts["f"], "R_new_max_deviation": dev, "R_new_min": r_min,
              "sup_deviation_from_one": rep.extra["sup_deviation_from_one"]}
    verdicts = [_verdict("R-new-equals-f", dev <= 1e-8, dev, 1e-8),
                _verdict("R-new-positive", r_min >= 0.5 * opts["f"], r_min, 0.5 * opts["f"])]
    return {"result": result, "verdicts": verdicts}


def _run_one(name: str, seed: int, outdir: str):
    """Worker body for verify-all; each experiment owns its subdirectory."""
    start = time.perf_counter()
    v = run_experiment(name, seed)
    sub = Path(outdir) / name
    sub.mkdir(parents=True, exist_ok=True)
    d = _jsonable(v.to_dict())
    (sub / "verdict.json").write_text(json.dumps(d, sort_keys=True, indent=2) + "\n")
    return d, {"wall_s": time.perf_counter() - start, **v.timing}


def worker_count(cfg: dict) -> int:
    env = os.environ.get("LNFLOW_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"LNFLOW_WORKERS must be an integer, got {env!r}") from exc
        if n < 1:
            raise ConfigError("LNFLOW_WORKERS must be positive")
        return n
    return cfg["workers"]


def task_verify_all(cfg: dict, out: Path, timing: dict) -> dict:
    names = cfg["experiments"]
    workers = worker_count(cfg)
    if workers == 1:
        pairs = [_run_one(n, cfg["seed"], str(out)) for n in names]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, n, cfg["seed"], str(out)) for n in names]
            pairs = [f.result() for f in futures]
    verdicts = []
    for name, (d, t) in zip(names, pairs):
        verdicts.append({k: d[k] for k in ("name", "status", "value", "threshold", "tag")})
        timing[name] = t
    return {"result": {"experiments": names}, "verdicts": verdicts}


HANDLERS = {"solve-ln": task_solve_ln, "run-flow": task_run_flow, "eigen": task_eigen,
            "v0": task_v0, "q-energy": task_q_energy, "flatten": task_flatten}


def run(config_path) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"{config_path}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg["output"])
    if not out.is_absolute():
        out = Path(config_path).resolve().parent / out
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    timing = {"started": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    start = time.perf_counter()
    try:
        if cfg["task"] == "verify-all":
            body = task_verify_all(cfg, out, timing)
        else:
            body = HANDLERS[cfg["task"]](cfg, out)
    except ConfigError as exc:
        print(f"{config_path}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FlowAbort, SolverError) as exc:
        report = {"task": cfg["task"], "status": "aborted", "error": str(exc), "verdicts": []}
        (out / "report.json").write_text(json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n")
        print(f"solver abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as exc:
        print(f"{config_path}: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    timing["elapsed_s"] = time.perf_counter() - start
    checked = [v for v in body["verdicts"] if v["status"] != "skipped"]
    ok = all(v["status"] == "pass" for v in checked)
    report = {"task": cfg["task"], "version": __version__, "status": "pass" if ok else "fail",
              **body}
    (out / "report.json").write_text(json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n")
    (out / "timing.json").write_text(json.dumps(_jsonable(timing), sort_keys=True, indent=2) + "\n")
    for v in body["verdicts"]:
        print(f"{v['status'].upper():7s} {v['name']}")
    return EXIT_OK if ok else EXIT_CHECK


# -- plots -------------------------------------------------------------------------------------

def _read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]], ndmin=2)
    return header, data


def _write_tsv(path: Path, header: list[str], rows) -> None:
    body = ["\t".join(header)] + ["\t".join(f"{x:.17g}" for x in row) for row in rows]
    path.write_text("\n".join(body) + "\n")


def emit_plots(directory) -> list[Path]:
    """Turn a run directory into plot-ready TSV files; returns the files written."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"no trace found: {d} is not a directory")
    written = []
    snaps = sorted((d / "snapshots").glob("u_t=*.csv"),
                   key=lambda p: float(p.stem.split("=", 1)[1])) if (d / "snapshots").is_dir() else []
    if snaps:
        cols, header = [], ["x"]
        for p in snaps:
            _, data = _read_csv(p)
            if not cols:
                cols.append(data[:, 0])
            cols.append(data[:, 1])
            header.append(f"u(t={p.stem.split('=', 1)[1]})")
        target = d / "u_vs_x.tsv"
        _write_tsv(target, header, np.column_stack(cols))
        written.append(target)
    if (d / "eta.csv").is_file():
        _, data = _read_csv(d / "eta.csv")
        keep = np.concatenate(([True], np.diff(data[:, 0]) > 0))
        target = d / "eta_vs_t.tsv"
        _write_tsv(target, ["t", "eta"], data[keep])
        written.append(target)
    if (d / "q_probe.csv").is_file():
        _, data = _read_csv(d / "q_probe.csv")
        target = d / "q_vs_eps.tsv"
        _write_tsv(target, ["eps", "Q"], data)
        written.append(target)
    if not written:
        raise FileNotFoundError(f"no trace found in {d}")
    return written


# -- entry point -------------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lnflow", description=__doc__)
    parser.add_argument("--version", action="version", version=f"lnflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a JSON experiment config")
    p_run.add_argument("config")
    sub.add_parser("list", help="list the built-in experiments")
    p_plots = sub.add_parser("plots", help="write plot-ready TSV files for a run directory")
    p_plots.add_argument("directory")
    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.config)
    if args.command == "list":
        sys.stdout.write(list_experiments())
        return EXIT_OK
    try:
        for path in emit_plots(args.directory):
            print(path)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
