"""Named built-in experiments, one verdict each, used by ``lnflow list`` and
the ``verify-all`` task."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .discretization import (build_mesh, interior_mask,
                             laplace_beltrami, mesh_from_nodes, values_of)
from .elliptic import (YamabeOperator, exact_ball_ln, first_dirichlet_eigenpair,
                       largest_homogeneous_solution, loewner_nirenberg_reference,
                       solve_linear_dirichlet, solve_yamabe_dirichlet)
from .flows import (FlowConfig, OpenQuestionRefusal, convergence_experiment, hamilton_tracker, run_flow)
from .functionals import escobar_Q, flatten_scalar, positivize_scalar, q_blowup_probe
from .geometry import Geometry
from .schedules import (JetSpec, Profile, Schedule, build_compatible_schedule, growth_certificate,
                        upper_supersolution)


@dataclass
class Verdict:
    name: str
    status: str
    value: float | None
    threshold: float | None
    tag: str
    details: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "status": self.status, "value": self.value,
                "threshold": self.threshold, "tag": self.tag, "details": self.details}


@dataclass(frozen=True)
class Experiment:
    name: str
    tag: str
    summary: str
    run: Callable[[int], Verdict]


def _verdict(exp: str, ok: bool, value, threshold, details, timing=None) -> Verdict:
    """Wall-clock numbers go to ``timing`` so that ``to_dict`` stays reproducible."""
    entry = REGISTRY[exp]
    return Verdict(exp, "pass" if ok else "fail", None if value is None else float(value),
                   None if threshold is None else float(threshold), entry.tag, details,
                   timing or {})


def _ball(n: int, M: int = 2000, radius: float = 1.0, warp: str = "euclidean"):
    g = Geometry.ball(n, radius, warp)
    return g, build_mesh(g, M, "graded")


def _direct_ball_run(n: int, monitors=("monotone", "global_bounds"), monitor_args=None):
    g, m = _ball(n)
    u0 = 0.5 * solve_yamabe_dirichlet(g, m, 0.5).solution.values
    sched = Schedule.uniform(g, Profile("exp", float(u0[-1])))
    cfg = FlowConfig("direct", t_end=30.0, dt_init=1e-3, dt_max=1.0, monitors=monitors)
    return g, m, convergence_experiment(g, m, u0, sched, cfg, monitor_args=monitor_args)


# -- experiments ------------------------------------------------------------------------------

def ball_ln_exact(seed: int = 0) -> Verdict:
    worst, runtime, rows = 0.0, 0.0, {}
    for n in (3, 4):
        start = time.perf_counter()
        g, m = _ball(n)
        ref = loewner_nirenberg_reference(g, m).solution.values
        runtime = max(runtime, time.perf_counter() - start)
        mask = m.nodes <= 0.9
        exact = exact_ball_ln(n)(m.nodes[mask])
        err = float(np.max(np.abs(ref[mask] - exact) / exact))
        rows[f"n={n}"] = err
        worst = max(worst, err)
    return _verdict("ball-ln-exact", worst < 5e-3 and runtime < 30.0, worst, 5e-3,
                    {"relative_error": rows, "runtime_limit_s": 30.0},
                    {"max_runtime_s": runtime})


def direct_flow_ball(seed: int = 0) -> Verdict:
    worst, details, timing, ok = 0.0, {}, {}, True
    for n in (3, 4):
        start = time.perf_counter()
        _, _, rep = _direct_ball_run(n)
        runtime = time.perf_counter() - start
        timing[f"n={n}"] = runtime
        mon = rep["monitors"]
        err = rep["interior_sup_error"]
        details[f"n={n}"] = {"interior_sup_error": err,
                             "monotone_violations": mon["monotone"]["violations"],
                             "bound_violations": mon["global_bounds"]["violations"]}
        worst = max(worst, err)
        ok = ok and err < 1e-2 and mon["monotone"]["violations"] == 0 \
            and mon["global_bounds"]["violations"] == 0 and runtime < 60.0
    return _verdict("direct-flow-ball", ok, worst, 1e-2, dict(details, runtime_limit_s=60.0),
                    timing)


def blowup_exponent_ball(seed: int = 0) -> Verdict:
    n = 4
    _, m, rep = _direct_ball_run(n, monitors=())
    slope = rep["blowup_exponent"]
    target = -(n - 2) / 2.0
    rel = abs(slope - target) / abs(target)
    return _verdict("blowup-exponent-ball", rel <= 0.05, slope, target,
                    {"relative_deviation": rel, "collar": [1e-3, 1e-1]})


def yamabe_fixed_point(seed: int = 0) -> Verdict:
    g, m = _ball(3, warp="hyperbolic")
    ones = np.ones(m.size)
    cfg = FlowConfig("yamabe", t_end=10.0, dt_init=1e-3, dt_max=1.0,
                     monitors=("monotone", "global_bounds"))
    still = run_flow(g, m, ones, Schedule.uniform(g, Profile("constant", 1.0)), cfg)
    drift = max(float(np.max(np.abs(s - 1.0))) for s in still.states)
    grow = run_flow(g, m, ones, Schedule.uniform(g, Profile("exp", 1.0)), cfg)
    low = min(float(np.min(s)) for s in grow.states)
    viol = grow.monitors["monotone"]["violations"]
    ok = drift < 1e-9 and low >= 1.0 - 1e-10 and viol == 0
    return _verdict("yamabe-fixed-point", ok, drift, 1e-9,
                    {"stationary_drift": drift, "exp_min": low, "monotone_violations": viol})


def covariance_pair(n: int = 3, M: int = 400, t_end: float = 2.0, dt: float = 0.01) -> float:
    """Largest matched-time gap between a Yamabe run on a hyperbolic ball and the same
    run on the conformally related flat ball, after dividing by the conformal factor."""
    flat = Geometry.ball(n, 0.5, "euclidean")
    fmesh = build_mesh(flat, M, "uniform")
    hyp = Geometry.ball(n, 2.0 * np.arctanh(0.5), "hyperbolic")
    hmesh = mesh_from_nodes(hyp, 2.0 * np.arctanh(fmesh.nodes))
    s = fmesh.nodes
    W = (2.0 / (1.0 - s ** 2)) ** ((n - 2) / 2.0)
    v0 = np.ones_like(s)
    cfg = FlowConfig("yamabe", t_end=t_end, dt_init=dt, dt_max=dt, adaptive=False,
                     normalize=False, monitors=())
    on_hyp = run_flow(hyp, hmesh, v0, Schedule.uniform(hyp, Profile("exp", float(v0[-1]))), cfg)
    on_flat = run_flow(flat, fmesh, v0 * W,
                       Schedule.uniform(flat, Profile("exp", float(v0[-1] * W[-1]))), cfg)
    return max(float(np.max(np.abs(a / W - b))) for a, b in zip(on_flat.states, on_hyp.states))


def yamabe_covariance(seed: int = 0) -> Verdict:
    gap = covariance_pair()
    return _verdict("yamabe-covariance", gap < 5e-6, gap, 5e-6, {"n": 3, "M": 400, "t_end": 2.0})


def slab_eigen_oracle(seed: int = 0) -> Verdict:
    worst, details, positive = 0.0, {}, True
    for L in (1.0, 10.0):
        for kappa in (0.0, -2.0):
            g = Geometry.slab(3, L, kappa)
            m = build_mesh(g, 2000, "graded")
            lam, phi = first_dirichlet_eigenpair(g, m)
            exact = 8.0 * np.pi ** 2 / L ** 2 + kappa
            rel = abs(lam - exact) / abs(exact)
            worst = max(worst, rel)
            positive = positive and bool(np.all(phi.values[m.interior] > 0))
            details[f"L={L:g},kappa={kappa:g}"] = {"lambda1": lam, "closed_form": exact}
    return _verdict("slab-eigen-oracle", worst < 5e-3 and positive, worst, 5e-3,
                    dict(details, eigenfunction_positive=positive))


def _homogeneous_slab_profile(n: int, length: float, kappa: float, x) -> np.ndarray:
    """Positive solution vanishing at both walls by shooting from the symmetric center."""
    c = 4.0 * (n - 1) / (n - 2)
    p = (n + 2.0) / (n - 2.0)
    nn1 = n * (n - 1.0)
    half = 0.5 * length

    def rhs(_, y):
        return [y[1], (kappa * y[0] + nn1 * np.abs(y[0]) ** p * np.sign(y[0])) / c]

    def zero(_, y):
        return y[0]
    zero.terminal = True

    def first_zero(a):
        sol = solve_ivp(rhs, (0.0, 50.0 * half), [a, 0.0], rtol=1e-12, atol=1e-14,
                        method="DOP853", events=zero)
        return sol.t_events[0][0] if sol.t_events[0].size else np.inf

    top = (-kappa / nn1) ** (1.0 / (p - 1.0))
    a = brentq(lambda s: first_zero(s) - half, 1e-6 * top, top * (1 - 1e-9), xtol=1e-13)
    sol = solve_ivp(rhs, (0.0, half), [a, 0.0], rtol=1e-12, atol=1e-14, method="DOP853",
                    dense_output=True)
    return sol.sol(np.abs(np.asarray(x, dtype=float) - half))[0]


def slab_v0_positive(seed: int = 0) -> Verdict:
    g, m = _ball(3)
    ball_sup = largest_homogeneous_solution(g, m).extra["interior_sup"]
    slab = Geometry.slab(3, 10.0, -2.0)
    sm = build_mesh(slab, 2000, "graded")
    rep = largest_homogeneous_solution(slab, sm)
    oracle = _homogeneous_slab_profile(3, 10.0, -2.0, sm.nodes)
    gap = float(np.max(np.abs(rep.solution.values - oracle)))
    ok = ball_sup < 1e-3 and rep.extra["interior_sup"] > 0.1 and rep.extra["decreasing"] \
        and gap < 1e-2
    return _verdict("slab-v0-positive", ok, rep.extra["interior_sup"], 0.1,
                    {"ball_interior_sup": ball_sup, "slab_decreasing": rep.extra["decreasing"],
                     "oracle_gap": gap})


def above_v0_path(seed: int = 0) -> Verdict:
    slab = Geometry.slab(3, 10.0, -2.0)
    m = build_mesh(slab, 2000, "graded")
    v0 = largest_homogeneous_solution(slab, m).solution.values
    u0 = v0 + 0.5
    cfg = FlowConfig("direct", t_end=30.0, dt_init=1e-3, dt_max=1.0, margin=1.0,
                     monitors=("global_bounds",))
    sched = Schedule.uniform(slab, Profile("exp", float(u0[0])))
    rep = convergence_experiment(slab, m, u0, sched, cfg, path="v0")
    dip = u0 - 0.6 * np.exp(-((m.nodes - 5.0) / 0.5) ** 2)
    try:
        convergence_experiment(slab, m, dip, sched, cfg, path="v0")
        refused, message = False, ""
    except OpenQuestionRefusal as exc:
        refused, message = True, str(exc)
    err = rep["interior_sup_error"]
    return _verdict("above-v0-path", err < 1e-2 and refused, err, 1e-2,
                    {"refused_below_v0": refused, "refusal_message": message})


def hamilton_decay(seed: int = 0) -> Verdict:
    g, m = _ball(3)
    K = 1e3
    w = values_of(solve_yamabe_dirichlet(g, m, K).solution)
    ref = loewner_nirenberg_reference(g, m).solution.values
    u0 = w + 0.5 * (1.0 - m.nodes ** 2) ** 2
    cfg = FlowConfig("direct", t_end=0.3, dt_init=1e-4, dt_max=2e-3, monitors=())
    trace = run_flow(g, m, u0, Schedule.uniform(g, Profile("constant", K)), cfg)
    rep = hamilton_tracker(trace, ref, 0.1)
    ok = rep["pass"] and rep["rate"] >= 0.5 * rep["c"]
    return _verdict("hamilton-decay", ok, rep["rate"], 0.5 * rep["c"],
                    {k: rep[k] for k in ("c", "rate", "stays_nonpositive", "nonincreasing",
                                         "final_ok", "worst_rise")})


def supersolution_residual(n: int, R_loc: float = 0.5, eps: float = 0.05, M: int = 2000) -> float:
    """Largest scaled elliptic residual of the local super-solution on a flat ball,
    over nodes with rho <= 0.95 R_loc."""
    g = Geometry.ball(n, R_loc, "euclidean")
    m = build_mesh(g, M, "uniform")
    ub = upper_supersolution(n, R_loc, eps)
    inner = m.nodes < R_loc * (1.0 - 1e-12)
    vals = np.empty(m.size)
    vals[inner] = ub(m.nodes[inner])
    vals[~inner] = vals[inner][-1]
    op = YamabeOperator.build(g, m)
    rel = op.residual(vals) / op.scale(vals)
    # the relative margin closes at the singular wall, so only the inner 95% is checked
    keep = m.nodes <= 0.95 * R_loc
    return float(np.max(rel[keep]))


def barriers(seed: int = 0) -> Verdict:
    residuals = {f"n={n}": supersolution_residual(n) for n in (3, 4, 5)}
    ub = upper_supersolution(3, 0.5, 0.05)
    args = {"upper_supersolution": {"ubar": ub, "center": 0.0, "radius": 0.5}}
    _, _, rep = _direct_ball_run(3, monitors=("lower_barrier", "upper_supersolution"),
                                 monitor_args=args)
    low, up = rep["monitors"]["lower_barrier"], rep["monitors"]["upper_supersolution"]
    worst = max(residuals.values())
    ok = worst <= 0 and low["pass"] and up["pass"]
    return _verdict("barriers", ok, worst, 0.0,
                    {"supersolution_residual": residuals, "lower_barrier": low,
                     "upper_supersolution": up})


def q_dichotomy(seed: int = 0) -> Verdict:
    slab = Geometry.slab(3, 10.0, -2.0)
    neg = q_blowup_probe(slab, build_mesh(slab, 2000, "graded"))
    g, m = _ball(3)
    pos = q_blowup_probe(g, m)
    flat = Geometry.ball(3, 1.0, "euclidean")
    fm = build_mesh(flat, 400, "uniform")
    xi = flatten_scalar(flat, fm)
    rep = positivize_scalar(flat, fm, 0.01, background=xi.solution.values)
    dev = rep.extra["R_new_max_deviation"]
    # exactly one of (lambda_1 > 0) and (Q unbounded below) holds on each geometry
    xor = all((r["lambda1"] > 0) != r["diverges"] for r in (neg, pos))
    ok = neg["diverges"] and not pos["diverges"] and xor and dev <= 1e-8
    return _verdict("q-dichotomy", ok, dev, 1e-8,
                    {"slab_Q": neg["Q"], "ball_Q": pos["Q"], "slab_diverges": neg["diverges"],
                     "ball_diverges": pos["diverges"], "dichotomy_holds": xor})


def richardson_derivative(fn, order: int, delta: float) -> float:
    """One-sided difference at 0 of the given order, improved by one Richardson step."""
    def diff(h):
        if order == 1:
            return (float(fn(h)) - float(fn(0.0))) / h
        return (float(fn(2 * h)) - 2.0 * float(fn(h)) + float(fn(0.0))) / h ** 2
    return 2.0 * diff(delta / 2.0) - diff(delta)


def compatible_jets(seed: int = 0) -> Verdict:
    g = Geometry.slab(3, 1.0)
    m = build_mesh(g, 200, "uniform")
    u0 = np.ones(m.size)

    def constant(v):
        return m.field(np.full(m.size, v))
    jet = JetSpec(constant(1.0), constant(0.3), constant(-0.7))
    one = build_compatible_schedule(g, m, u0, jet, k=1)
    two = build_compatible_schedule(g, m, u0, jet, k=2)
    d1 = richardson_derivative(one.profiles[0].value, 1, 1e-4)
    d2 = richardson_derivative(lambda t: two.profiles[0].short_time(t), 2, 1e-3)
    certs = {kind: growth_certificate(two, 3, kind, horizon=30.0, t_from=1e-3)["pass"]
             for kind in ("direct", "yamabe")}
    e1, e2 = abs(d1 - 0.3), abs(d2 + 0.7)
    ok = e1 < 1e-3 and e2 < 1e-2 and all(certs.values())
    return _verdict("compatible-jets", ok, e1, 1e-3,
                    {"first_derivative": d1, "second_derivative": d2, "second_error": e2,
                     "certificates": certs})


def observed_order(errors) -> list[float]:
    e = np.asarray(errors, dtype=float)
    return np.log2(e[:-1] / e[1:]).tolist()


def _ball_errors(n: int, M: int) -> tuple[float, float]:
    """Interior errors of the reference (relative) and of the direct flow on the unit ball."""
    g = Geometry.ball(n, 1.0)
    m = build_mesh(g, M, "graded")
    exact = exact_ball_ln(n)(m.nodes)
    mask = interior_mask(m, 0.1)
    ref = loewner_nirenberg_reference(g, m).solution.values
    ln = float(np.max(np.abs(ref - exact)[mask] / exact[mask]))
    u0 = 0.5 * solve_yamabe_dirichlet(g, m, 0.5).solution.values
    cfg = FlowConfig("direct", t_end=30.0, dt_max=1.0, monitors=())
    tr = run_flow(g, m, u0, Schedule.uniform(g, Profile("exp", float(u0[-1]))), cfg)
    return ln, float(np.max(np.abs(tr.states[-1] - exact)[mask]))


def property_suite(seed: int = 0) -> Verdict:
    rng = np.random.default_rng(seed)
    results = {}

    geoms = [Geometry.ball(3, 1.0), Geometry.annulus(3, 0.5, 1.5), Geometry.slab(4, 2.0, -1.0),
             Geometry.ball(4, 1.0, "hyperbolic")]

    # comparison principle for the Dirichlet problem
    worst = np.inf
    for k in range(50):
        geom = geoms[k % len(geoms)]
        mesh = build_mesh(geom, 200, "uniform")
        lo = rng.uniform(0.1, 3.0, len(geom.boundary_components))
        hi = lo + rng.uniform(0.0, 2.0, lo.size)
        a = solve_yamabe_dirichlet(geom, mesh, hi).solution.values
        b = solve_yamabe_dirichlet(geom, mesh, lo).solution.values
        worst = min(worst, float(np.min(a - b)))
    results["comparison"] = worst >= -1e-10

    # discrete maximum principle: (-Lap + c) f >= 0 with c >= 0 and f >= 0 on the boundary
    lowest = np.inf
    for _ in range(50):
        geom = geoms[rng.integers(len(geoms))]
        mesh = build_mesh(geom, int(rng.integers(20, 300)),
                          ["uniform", "graded"][rng.integers(2)])
        op = laplace_beltrami(geom, mesh).scaled(-1.0).shifted(rng.uniform(0.0, 10.0, mesh.size))
        rhs = rng.uniform(0.0, 5.0, mesh.size)
        bc = rng.uniform(0.0, 1.0, len(geom.boundary_components))
        f = values_of(solve_linear_dirichlet(op, rhs, bc, geom, mesh))
        lowest = min(lowest, float(np.min(f)))
    results["maximum_principle"] = lowest >= -1e-10

    # scale invariance of the boundary quotient
    g, m = Geometry.ball(3, 1.0), build_mesh(Geometry.ball(3, 1.0), 200)
    u = rng.uniform(0.5, 2.0, m.size)
    q = escobar_Q(g, m, u).value
    drift = max(abs(escobar_Q(g, m, s * u).value - q) for s in (0.5, 2.0, 10.0))
    results["Q_scale_invariance"] = bool(drift <= 1e-12 * max(1.0, abs(q)))

    # self-adjointness of the Laplacian in the volume inner product
    asym = 0.0
    for geom in geoms:
        mesh = build_mesh(geom, 300, "graded")
        lap = laplace_beltrami(geom, mesh)
        x, y = rng.normal(size=mesh.size), rng.normal(size=mesh.size)
        x[list(mesh.dirichlet)] = 0.0
        y[list(mesh.dirichlet)] = 0.0
        V = mesh.quad_weights
        gap = abs(np.dot(V * lap.apply(x), y) - np.dot(V * x, lap.apply(y)))
        asym = max(asym, gap / np.dot(V * np.abs(lap.apply(x)), np.abs(y)))
    results["self_adjoint"] = bool(asym <= 1e-12)

    # mesh-doubling order of the reference solution and of the direct flow
    orders = {}
    for n in (3, 4):
        ln_err, flow_err = [], []
        for M in (500, 1000, 2000):
            ln, fl = _ball_errors(n, M)
            ln_err.append(ln)
            flow_err.append(fl)
        orders[f"reference n={n}"] = observed_order(ln_err)
        orders[f"direct_flow n={n}"] = observed_order(flow_err)
    results["mesh_order"] = bool(min(min(v) for v in orders.values()) >= 1.8)
    ok = all(results.values())
    return _verdict("property-suite", ok, float(sum(results.values())), float(len(results)),
                    {"checks": results, "orders": orders, "comparison_worst": worst,
                     "max_principle_min": lowest, "Q_drift": drift, "self_adjoint_gap": asym})


_ENTRIES = [
    ("ball-ln-exact", "ball-ln-exact", "reference solution against the closed form on the unit ball", ball_ln_exact),
    ("direct-flow-ball", "direct-flow-converges", "direct flow reaches the complete solution, monotone and bounded", direct_flow_ball),
    ("blowup-exponent-ball", "blowup-exponent", "boundary blow-up rate of the flow limit", blowup_exponent_ball),
    ("yamabe-fixed-point", "yamabe-fixed-point-monotone", "hyperbolic fixed point and monotone growth", yamabe_fixed_point),
    ("yamabe-covariance", "yamabe-covariance", "same run on conformally related backgrounds", yamabe_covariance),
    ("slab-eigen-oracle", "eigen-oracle", "first eigenvalue of the conformal Laplacian on slabs", slab_eigen_oracle),
    ("slab-v0-positive", "v0-dichotomy", "largest homogeneous solution: zero on the ball, positive on the slab", slab_v0_positive),
    ("above-v0-path", "above-v0-convergence", "flow from data above v0 on a normalized background; refusal below", above_v0_path),
    ("hamilton-decay", "hamilton-decay", "decay of the interior excess over the reference", hamilton_decay),
    ("barriers", "barriers", "lower collar barrier and local super-solution", barriers),
    ("q-dichotomy", "q-dichotomy", "boundary quotient blow-up and the positive scalar curvature pipeline", q_dichotomy),
    ("compatible-jets", "compatible-jets", "compatible boundary data and growth certificates", compatible_jets),
    ("property-suite", "property-suite", "comparison, maximum principle, invariances, mesh order", property_suite),
]

REGISTRY: dict[str, Experiment] = {name: Experiment(name, tag, summary, fn)
                                   for name, tag, summary, fn in _ENTRIES}


def list_experiments() -> str:
    width = max(len(n) for n in REGISTRY)
    twidth = max(len(e.tag) for e in REGISTRY.values())
    lines = [f"{'name':<{width}}  {'tag':<{twidth}}  summary"]
    for e in REGISTRY.values():
        lines.append(f"{e.name:<{width}}  {e.tag:<{twidth}}  {e.summary}")
    return "\n".join(lines) + "\n"


def run_experiment(name: str, seed: int = 0) -> Verdict:
    if name not in REGISTRY:
        raise KeyError(f"unknown experiment {name!r}")
    return REGISTRY[name].run(seed)


__all__ = ["Verdict", "Experiment", "REGISTRY", "list_experiments", "run_experiment",
           "covariance_pair", "supersolution_residual", "richardson_derivative",
           "observed_order"]
