"""Backward-Euler integration of the direct flow and the Yamabe flow with
runtime monitors for monotonicity, bounds, barriers and convergence.

Both flows may run on a conformally related background ``W^(4/(n-2)) g``
given by a positive field ``W``; the state is then the factor relative to
that background and the operator is ``W^-p F_g(W v)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .discretization import Field, Mesh, interior_mask, values_of
from .elliptic import (SolverError, YamabeOperator, damped_newton, largest_homogeneous_solution,
                       loewner_nirenberg_reference, solve_yamabe_dirichlet, exact_ball_ln)
from .geometry import Geometry, scalar_curvature
from .schedules import Profile, Schedule, direct_flow_jet, yamabe_flow_jet

MONITORS = ("monotone", "global_bounds", "interior_bound", "lower_barrier",
            "upper_supersolution", "hamilton", "comparison")


class FlowAbort(SolverError):
    def __init__(self, message: str, trace: "FlowTrace | None" = None):
        super().__init__(message)
        self.trace = trace


class OpenQuestionRefusal(ValueError):
    """Raised when a requested run lies outside the hypotheses of the convergence result."""


@dataclass(frozen=True)
class FlowConfig:
    flow_kind: str = "direct"
    t_end: float = 1.0
    dt_init: float = 1e-3
    dt_min: float = 1e-12
    dt_max: float = 1.0
    step_rtol: float = 1e-3
    step_atol: float = 1e-6
    newton_tol: float = 1e-11
    monitors: tuple[str, ...] = ("monotone", "global_bounds")
    margin: float = 0.1
    adaptive: bool = True
    normalize: bool = True
    tol_mono: float = 1e-8
    fail_fast: bool = False

    def __post_init__(self) -> None:
        if self.flow_kind not in ("direct", "yamabe"):
            raise ValueError("flow_kind must be 'direct' or 'yamabe'")
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")
        if not 0 < self.dt_min <= self.dt_init <= self.dt_max:
            raise ValueError("need 0 < dt_min <= dt_init <= dt_max")
        unknown = set(self.monitors) - set(MONITORS)
        if unknown:
            raise ValueError(f"unknown monitors {sorted(unknown)}")


@dataclass
class FlowTrace:
    geom: Geometry
    mesh: Mesh
    config: FlowConfig
    schedule: Schedule
    times: list[float]
    states: list[np.ndarray]
    diagnostics: dict[str, list[float]]
    background: np.ndarray | None = None
    background_R_inf: float = 0.0
    monitors: dict[str, dict] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def final(self) -> Field:
        return self.mesh.field(self.states[-1])

    def field_at(self, k: int) -> Field:
        return self.mesh.field(self.states[k])

    def physical(self, k: int = -1) -> np.ndarray:
        """State expressed against the original metric (multiplied by the background)."""
        s = self.states[k]
        return s if self.background is None else s * self.background

    def write(self, directory, snapshot_count: int = 6) -> Path:
        out = Path(directory)
        (out / "snapshots").mkdir(parents=True, exist_ok=True)
        cols = ["t"] + sorted(self.diagnostics)
        lines = [",".join(cols)]
        for i, t in enumerate(self.times):
            row = [f"{t:.17g}"] + [f"{self.diagnostics[c][i]:.17g}" for c in cols[1:]]
            lines.append(",".join(row))
        (out / "trace.csv").write_text("\n".join(lines) + "\n")
        picks = np.unique(np.linspace(0, len(self.times) - 1, snapshot_count).round().astype(int))
        for k in picks:
            self.field_at(int(k)).to_csv(out / "snapshots" / f"u_t={self.times[k]:.6g}.csv")
        report = {"monitors": self.monitors, "warnings": self.warnings,
                  "steps": len(self.times) - 1, "t_final": self.times[-1]}
        (out / "report.json").write_text(json.dumps(_jsonable(report), sort_keys=True, indent=2))
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else str(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# -- stepping -----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FlowOperator:
    """Right-hand side pieces of both flows on an optional conformal background."""

    op: YamabeOperator
    background: np.ndarray | None = None

    @property
    def mesh(self) -> Mesh:
        return self.op.mesh

    def F(self, v: np.ndarray) -> np.ndarray:
        if self.background is None:
            return self.op.residual(v)
        W = self.background
        return W ** (-self.op.p) * self.op.residual(W * v)

    def F_scale(self, v: np.ndarray) -> np.ndarray:
        if self.background is None:
            return self.op.scale(v)
        W = self.background
        return W ** (-self.op.p) * self.op.scale(W * v)

    def F_jacobian(self, v: np.ndarray) -> np.ndarray:
        """Banded Jacobian of F without boundary rows substituted."""
        lap = self.op.lap
        c = self.op.c
        N = v.size
        ab = np.zeros((3, N))
        ab[0, 1:] = c * lap.upper[:-1]
        ab[2, :-1] = c * lap.lower[1:]
        if self.background is None:
            ab[1] = c * lap.diag + self.op.reaction_derivative(v)
            return ab
        W = self.background
        r = W ** (-self.op.p)
        ab[1] = (c * lap.diag + self.op.reaction_derivative(W * v)) * r * W
        ab[0, 1:] *= r[:-1] * W[1:]
        ab[2, :-1] *= r[1:] * W[:-1]
        return ab


def _finish_rows(ab: np.ndarray, rows) -> np.ndarray:
    N = ab.shape[1]
    for i in rows:
        ab[1, i] = 1.0
        if i + 1 < N:
            ab[0, i + 1] = 0.0
        if i >= 1:
            ab[2, i - 1] = 0.0
    return ab


def _implicit_step(fop: FlowOperator, kind: str, u: np.ndarray, dt: float, bvals: np.ndarray,
                   tol: float):
    rows = list(fop.mesh.dirichlet)
    start = u.copy()
    start[rows] = bvals
    p = fop.op.p
    n = fop.op.geom.n
    ky = (n - 2.0) / 4.0

    if kind == "direct":
        def residual(v):
            G = fop.F(v) - (v - u) / dt
            G[rows] = 0.0
            return G

        def scale(v):
            return fop.F_scale(v) + (np.abs(v) + np.abs(u)) / dt

        def jacobian(v):
            ab = fop.F_jacobian(v)
            ab[1] -= 1.0 / dt
            return _finish_rows(ab, rows)
    else:
        # prefactor form v^(p-1) (v - u)/dt = ((n-2)/4) F(v)
        def residual(v):
            G = ky * fop.F(v) - v ** (p - 1.0) * (v - u) / dt
            G[rows] = 0.0
            return G

        def scale(v):
            return ky * fop.F_scale(v) + v ** (p - 1.0) * (np.abs(v) + np.abs(u)) / dt

        def jacobian(v):
            ab = ky * fop.F_jacobian(v)
            ab[1] -= ((p - 1.0) * v ** (p - 2.0) * (v - u) + v ** (p - 1.0)) / dt
            return _finish_rows(ab, rows)

    return damped_newton(residual, jacobian, scale, start, tol)


def _flow_step(geom, mesh, u, t, dt, schedule, kind, tol, background):
    fop = FlowOperator(YamabeOperator.build(geom, mesh),
                       None if background is None else values_of(background))
    res = _implicit_step(fop, kind, values_of(u), dt, schedule.values(t + dt), tol)
    if not res.converged or np.min(res.u) <= 0:
        raise FlowAbort(f"implicit step failed at t={t:.6g}, dt={dt:.3g}")
    return mesh.field(res.u)


def direct_flow_step(geom: Geometry, mesh: Mesh, u, t: float, dt: float, schedule: Schedule,
                     tol: float = 1e-11, background=None) -> Field:
    """Backward-Euler step of u_t = c Lap u - R u - n(n-1) u^p with Dirichlet data schedule(t+dt)."""
    return _flow_step(geom, mesh, u, t, dt, schedule, "direct", tol, background)


def yamabe_flow_step(geom: Geometry, mesh: Mesh, u, t: float, dt: float, schedule: Schedule,
                     tol: float = 1e-11, background=None) -> Field:
    """Backward-Euler step of u_t = (n-1) u^(-4/(n-2)) (Lap u - (R u + n(n-1) u^p)(n-2)/(4(n-1)))."""
    return _flow_step(geom, mesh, u, t, dt, schedule, "yamabe", tol, background)


# -- driver ---------------------------------------------------------------------------------

def _global_bounds(trace_like, n: int, R_inf: float, u0: np.ndarray, phi_sup: float,
                   phi_inf: float, kind: str) -> tuple[float, float]:
    level = max(-R_inf, 0.0) / (n * (n - 1))
    upper = max(phi_sup, float(np.max(u0)), level ** ((n - 2) / 4.0))
    lower = min(1.0, float(np.min(u0)), phi_inf) if kind == "yamabe" else -np.inf
    return upper, lower


def run_flow(geom: Geometry, mesh: Mesh, u0, schedule: Schedule, config: FlowConfig,
             background=None, monitor_args: dict | None = None) -> FlowTrace:
    """Integrate a flow to ``config.t_end`` with step-doubling error control.

    Yamabe runs with ``config.normalize`` use the background solving the
    Yamabe Dirichlet problem with boundary value 1 (scalar curvature -n(n-1)),
    and the returned states are relative to it.
    """
    kind = config.flow_kind
    u_phys = values_of(u0).copy()
    if np.any(u_phys <= 0):
        raise ValueError("initial data must be positive")
    W = None if background is None else values_of(background).copy()
    if W is None and kind == "yamabe" and config.normalize:
        R = scalar_curvature(geom).R(mesh.nodes)
        if not np.allclose(R, -geom.n * (geom.n - 1), rtol=0, atol=1e-12):
            W = solve_yamabe_dirichlet(geom, mesh, 1.0).solution.values
    u = u_phys if W is None else u_phys / W
    rows = list(mesh.dirichlet)
    warnings = []
    phi0 = schedule.values(0.0)
    if np.max(np.abs(u[rows] - phi0)) > 1e-8 * max(1.0, float(np.max(np.abs(phi0)))):
        warnings.append("initial data does not match the boundary schedule at t=0")
    if W is None:
        jet = direct_flow_jet(geom, mesh, u) if kind == "direct" else yamabe_flow_jet(geom, mesh, u)
        mismatch = float(np.max(np.abs(jet.trace(1) - schedule.rates(0.0))))
        if mismatch > 1e-3 * max(1.0, float(np.max(np.abs(jet.trace(1))))):
            warnings.append(f"first-order compatibility mismatch {mismatch:.3e} at t=0")
    R_inf = -geom.n * (geom.n - 1.0) if W is not None else float(
        np.min(scalar_curvature(geom).R(mesh.nodes)))
    fop = FlowOperator(YamabeOperator.build(geom, mesh), W)
    u[rows] = phi0
    hypotheses = initial_hypotheses(geom, mesh, u_phys, schedule, kind)
    if not hypotheses["holds"]:
        warnings.append("initial data is not a certified subsolution; monotonicity is not guaranteed")

    diag_names = ("dt", "min_step_increment", "bound_violation", "newton_residual")
    trace = FlowTrace(geom, mesh, config, schedule, [0.0], [u.copy()],
                      {k: [0.0] for k in diag_names}, W, R_inf, warnings=warnings)
    trace.monitors["initial_hypotheses"] = hypotheses
    u_init = u.copy()
    phi_sup, phi_inf = float(np.max(phi0)), float(np.min(phi0))
    t, dt = 0.0, config.dt_init
    inner = mesh.interior

    def step(state, t0, h):
        res = _implicit_step(fop, kind, state, h, schedule.values(t0 + h), config.newton_tol)
        if not res.converged or np.min(res.u) <= 0:
            return None
        return res

    while t < config.t_end * (1 - 1e-14):
        h = min(dt, config.t_end - t)
        if config.adaptive:
            full = step(u, t, h)
            half = step(u, t, 0.5 * h) if full is not None else None
            two = step(half.u, t + 0.5 * h, 0.5 * h) if half is not None else None
            if two is None:
                dt = 0.25 * h
                if dt < config.dt_min:
                    raise FlowAbort(f"step size underflow at t={t:.6g}", trace)
                continue
            scale = config.step_atol + config.step_rtol * np.abs(two.u)
            err = float(np.max(np.abs(two.u - full.u)[inner] / scale[inner]))
            if err > 1.0:
                dt = max(h * max(0.2, 0.9 / np.sqrt(err)), 0.0)
                if dt < config.dt_min:
                    raise FlowAbort(f"step size underflow at t={t:.6g}", trace)
                continue
            new, resid = two.u, max(half.residual, two.residual)
            dt = min(config.dt_max, h * min(2.0, 0.9 / np.sqrt(max(err, 1e-12))))
        else:
            res = step(u, t, h)
            if res is None:
                raise FlowAbort(f"implicit step failed at t={t:.6g}", trace)
            new, resid = res.u, res.residual
        t += h
        phi = schedule.values(t)
        phi_sup, phi_inf = max(phi_sup, float(np.max(phi))), min(phi_inf, float(np.min(phi)))
        upper, lower = _global_bounds(trace, geom.n, R_inf, u_init, phi_sup, phi_inf, kind)
        # measured relative to the bound so that rounding at huge boundary values is not flagged
        viol = max((float(np.max(new)) - upper) / max(1.0, upper), lower - float(np.min(new)))
        trace.times.append(t)
        trace.states.append(new.copy())
        d = trace.diagnostics
        d["dt"].append(h)
        d["min_step_increment"].append(float(np.min(new - u)))
        d["bound_violation"].append(viol)
        d["newton_residual"].append(resid)
        u = new
        if config.fail_fast and "monotone" in config.monitors and \
                d["min_step_increment"][-1] < -config.tol_mono * h:
            break
    evaluate_monitors(trace, monitor_args or {})
    return trace


def initial_hypotheses(geom: Geometry, mesh: Mesh, u0: np.ndarray, schedule: Schedule,
                       kind: str, tol: float = 1e-8) -> dict:
    """Subsolution test on u0 and nondecreasing data; for the Yamabe flow also the
    sign of L(mu) where mu vanishes."""
    op = YamabeOperator.build(geom, mesh)
    inner = mesh.interior
    rel = op.residual(u0)[inner] / op.scale(u0)[inner]
    out = {"min_scaled_residual": float(np.min(rel)),
           "subsolution": bool(np.min(rel) >= -tol),
           "schedule_nondecreasing": schedule.is_nondecreasing()}
    holds = out["subsolution"] and out["schedule_nondecreasing"]
    if kind == "yamabe":
        flags = yamabe_flow_jet(geom, mesh, u0).aux["condition_at_zero_mu"]
        cond = all(flags.values())
        out["L_mu_nonnegative_where_mu_vanishes"] = flags
        holds = holds and bool(cond)
    out["holds"] = bool(holds)
    return out


def evaluate_monitors(trace: FlowTrace, args: dict) -> dict:
    cfg = trace.config
    out = trace.monitors
    if "monotone" in cfg.monitors:
        out["monotone"] = monitor_monotone(trace, cfg.tol_mono)
    if "global_bounds" in cfg.monitors:
        out["global_bounds"] = monitor_global_bounds(trace, trace.geom)
    if "interior_bound" in cfg.monitors:
        out["interior_bound"] = monitor_interior_bound(trace, trace.geom)
    if "lower_barrier" in cfg.monitors:
        out["lower_barrier"] = monitor_lower_barrier(trace, **args.get("lower_barrier", {}))
    if "upper_supersolution" in cfg.monitors and "upper_supersolution" in args:
        out["upper_supersolution"] = monitor_upper_supersolution(trace, **args["upper_supersolution"])
    if "hamilton" in cfg.monitors and "hamilton" in args:
        out["hamilton"] = hamilton_tracker(trace, **args["hamilton"])
    return out


# -- monitors ---------------------------------------------------------------------------------

def monitor_monotone(trace: FlowTrace, tol_mono: float = 1e-8) -> dict:
    """Each accepted step must satisfy min(u_new - u_old) >= -tol_mono * dt."""
    inc = np.asarray(trace.diagnostics["min_step_increment"][1:])
    dts = np.asarray(trace.diagnostics["dt"][1:])
    bad = inc < -tol_mono * dts
    hyp = trace.monitors.get("initial_hypotheses", {}).get("holds")
    return {"violations": int(bad.sum()), "worst": float(np.min(inc / dts)) if inc.size else 0.0,
            "hypotheses_hold": hyp, "pass": bool(not bad.any())}


def monitor_global_bounds(trace: FlowTrace, geom: Geometry, slack: float = 1e-8) -> dict:
    """Upper bound max{sup phi, sup u0, (max(-inf R,0)/(n(n-1)))^((n-2)/4)}; Yamabe lower bound.

    Upper violations are relative to the bound.
    """
    viol = np.asarray(trace.diagnostics["bound_violation"][1:])
    bad = viol > slack
    return {"violations": int(bad.sum()), "worst": float(np.max(viol)) if viol.size else -np.inf,
            "pass": bool(not bad.any())}


def monitor_interior_bound(trace: FlowTrace, geom: Geometry, exponent: float | None = None,
                           min_dist: float | None = None) -> dict:
    """u <= C dist^(-exponent) on interior nodes with C fitted at t_end/2 and stable after."""
    if exponent is None:
        exponent = (geom.n - 2) / 2.0
    mesh = trace.mesh
    if min_dist is None:
        min_dist = trace.config.margin
    sel = mesh.interior & (mesh.dist >= min_dist)
    dist = mesh.dist[sel]
    times = np.asarray(trace.times)
    half = int(np.searchsorted(times, 0.5 * times[-1]))
    consts = np.array([np.max(trace.physical(k)[sel] * dist ** exponent)
                       for k in range(half, len(times))])
    C = float(consts[0])
    ratio_hi, ratio_lo = float(np.max(consts) / C), float(np.min(consts) / C)
    return {"exponent": exponent, "C_fit": C, "max_ratio": ratio_hi, "min_ratio": ratio_lo,
            "pass": bool(ratio_hi <= 2.0 and ratio_lo >= 0.5)}


def monitor_lower_barrier(trace: FlowTrace, x1: float = 0.1, t1: float | None = None,
                          c: float | None = None, slack: float = 1e-8) -> dict:
    """u >= psi on the collar {dist <= x1} for t >= t1, with adaptive c and t1."""
    from .schedules import lower_barrier

    geom, mesh, sched = trace.geom, trace.mesh, trace.schedule
    times = np.asarray(trace.times)
    if t1 is None:
        target = 10.0 * float(np.max(trace.physical(0)))
        hits = [k for k, t in enumerate(times) if np.min(sched.values(t)) > target]
        if not hits:
            return {"pass": True, "skipped": True, "reason": "schedule never exceeds 10 sup u0"}
        k1 = hits[0]
    else:
        k1 = int(np.searchsorted(times, t1))
    t1 = float(times[k1])
    collar = mesh.dist <= x1
    unit = lower_barrier(geom, sched, 1.0, x1)
    if c is None:
        psi1 = unit(mesh.nodes, t1)
        pos = collar & (psi1 > 0)
        # the unit barrier tracks phi on the wall, so the ratio is capped at 1 there
        c = 0.5 * min(1.0, float(np.min(trace.physical(k1)[pos] / psi1[pos])))
    worst = np.inf
    violations = 0
    for k in range(k1, len(times)):
        margin = trace.physical(k)[collar] - c * unit(mesh.nodes[collar], times[k])
        worst = min(worst, float(np.min(margin)))
        violations += int(np.min(margin) < -slack)
    return {"c": c, "x1": x1, "t1": t1, "worst_margin": worst, "violations": violations,
            "pass": violations == 0}


def monitor_upper_supersolution(trace: FlowTrace, ubar, center: float, radius: float,
                                slack: float = 1e-8) -> dict:
    """u <= ubar(|x - center|) on the open ball of the given radius, at every stored time."""
    rho = np.abs(trace.mesh.nodes - center)
    inside = rho < radius
    bound = ubar(rho[inside])
    worst = min(float(np.min(bound - trace.physical(k)[inside])) for k in range(len(trace.times)))
    return {"worst_margin": worst, "pass": worst >= -slack}


def hamilton_tracker(trace: FlowTrace, u_ln, margin: float, R_floor: float | None = None,
                     fit_floor: float = 1e-6) -> dict:
    """eta(t) = interior max of (u - u_LN) and the checks on its evolution."""
    if u_ln is None:
        raise ValueError("a reference solution is required")
    geom, mesh = trace.geom, trace.mesh
    ref = values_of(u_ln)
    mask = interior_mask(mesh, margin) & mesh.interior
    times = np.asarray(trace.times)
    eta = np.array([np.max(trace.physical(k)[mask] - ref[mask]) for k in range(len(times))])
    n = geom.n
    if R_floor is None:
        R_floor = trace.background_R_inf if trace.background is not None else float(
            np.min(scalar_curvature(geom).R(mesh.nodes)))
    c = R_floor + n * (n - 1) * (n + 2) / (n - 2) * float(np.min(ref[mask])) ** (4.0 / (n - 2))
    stays = True
    crossed = False
    for e in eta:
        if e <= 0:
            crossed = True
        elif crossed and e > 1e-6:
            stays = False
    pos = eta > 1e-6
    steps = np.flatnonzero(pos[:-1])
    rises = eta[steps + 1] - eta[steps]
    nonincreasing = bool(np.all(rises <= 1e-8)) if steps.size else True
    fit = pos & (eta > max(fit_floor, 1e-12))
    rate = np.nan
    if fit.sum() >= 3:
        rate = float(-np.polyfit(times[fit], np.log(eta[fit]), 1)[0])
    final_ok = bool(eta[-1] <= max(1e-3, eta[0] * np.exp(-c * times[-1])))
    return {"eta": eta.tolist(), "times": times.tolist(), "c": c, "rate": rate,
            "rate_ratio": rate / c if c > 0 and np.isfinite(rate) else np.nan,
            "stays_nonpositive": stays, "nonincreasing": nonincreasing, "final_ok": final_ok,
            "worst_rise": float(np.max(rises)) if steps.size else 0.0,
            "pass": bool(stays and nonincreasing and final_ok)}


def monitor_comparison(trace_a: FlowTrace, trace_b: FlowTrace, slack: float = 1e-8) -> dict:
    """u_A >= u_B - slack nodewise at matched output times."""
    tb = np.asarray(trace_b.times)
    worst = np.inf
    matched = 0
    for k, t in enumerate(trace_a.times):
        j = int(np.argmin(np.abs(tb - t)))
        if abs(tb[j] - t) > 1e-12 * max(1.0, abs(t)):
            continue
        matched += 1
        worst = min(worst, float(np.min(trace_a.physical(k) - trace_b.physical(j))))
    return {"matched_times": matched, "worst_margin": worst,
            "pass": bool(matched > 0 and worst >= -slack)}


# -- experiments ---------------------------------------------------------------------------

def fit_blowup_exponent(mesh: Mesh, u, collar=(1e-3, 1e-1)) -> float:
    """Least-squares slope of log u against log dist over the collar."""
    d = mesh.dist
    sel = mesh.interior & (d >= collar[0]) & (d <= collar[1])
    return float(np.polyfit(np.log(d[sel]), np.log(values_of(u)[sel]), 1)[0])


REFUSAL = ("initial data does not exceed the largest homogeneous solution v0 everywhere; "
           "whether the direct flow converges from such data is an open question, so the "
           "run is refused")


def convergence_experiment(geom: Geometry, mesh: Mesh, u0, schedule: Schedule,
                           config: FlowConfig, reference=None, path: str = "direct",
                           collar=(1e-3, 1e-1), monitor_args: dict | None = None) -> dict:
    """Run a flow to t_end and compare with the Loewner-Nirenberg reference.

    ``path="v0"`` first computes the largest homogeneous solution, requires
    u0 > v0, picks a Dirichlet solution between them as background and runs
    the direct flow for the quotient on that background.
    """
    u_init = values_of(u0)
    report: dict = {"path": path}
    background = None
    sched = schedule
    if path == "v0":
        v0 = largest_homogeneous_solution(geom, mesh)
        gap = u_init - v0.solution.values
        inner = mesh.interior
        if np.min(gap[inner]) <= 1e-6:
            raise OpenQuestionRefusal(REFUSAL)
        ubar, j = _intermediate_solution(geom, mesh, u_init)
        background = ubar
        sched = _divide_schedule(schedule, ubar[list(mesh.dirichlet)])
        report.update(v0_interior_sup=v0.extra["interior_sup"], background_bc=1.0 / j)
    if reference is None:
        if geom.kind == "warped_ball" and geom.warp == "euclidean":
            reference = exact_ball_ln(geom.n, geom.x_hi)(mesh.nodes)
        else:
            reference = loewner_nirenberg_reference(geom, mesh, margin=config.margin).solution.values
    ref = values_of(reference)
    cfg = replace(config, normalize=False) if background is not None else config
    trace = run_flow(geom, mesh, u_init, sched, cfg, background=background,
                     monitor_args=monitor_args)
    final = trace.physical(-1)
    mask = interior_mask(mesh, config.margin)
    err = np.abs(final - ref)[mask]
    report.update(
        t_end=trace.times[-1], steps=len(trace.times) - 1,
        interior_sup_error=float(np.max(err)),
        interior_relative_error=float(np.max(err / np.abs(ref[mask]))),
        blowup_exponent=fit_blowup_exponent(mesh, final, collar),
        monitors=trace.monitors, warnings=trace.warnings)
    report["trace"] = trace
    return report


def _intermediate_solution(geom: Geometry, mesh: Mesh, u0: np.ndarray) -> tuple[np.ndarray, int]:
    """First member of the decreasing sequence (data 1/j) that lies strictly below u0."""
    j, prev = 1, None
    while j <= 2 ** 20:
        sol = solve_yamabe_dirichlet(geom, mesh, 1.0 / j, init=prev).solution.values
        if np.all(sol < u0 - 1e-9):
            return sol, j
        prev, j = sol, 2 * j
    raise OpenQuestionRefusal(REFUSAL)


def _divide_schedule(schedule: Schedule, factors: np.ndarray) -> Schedule:
    profiles = []
    for p, f in zip(schedule.profiles, factors):
        if not isinstance(p, Profile):
            raise ValueError("only closed-form profiles can be rescaled")
        profiles.append(p.rescaled(p.c / f))
    return Schedule(tuple(profiles), schedule.names)
