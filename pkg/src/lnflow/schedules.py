"""Boundary-data schedules, growth certificates, compatibility jets, the
construction of compatible short-time data and the explicit barriers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .discretization import (Field, Mesh, build_mesh, extrapolate_boundary, flux_divergence,
                             laplace_beltrami, mesh_from_nodes, values_of)
from .elliptic import YamabeOperator, solve_linear_dirichlet
from .geometry import Geometry

FAMILIES = ("exp", "linear", "log", "power", "constant")
DESIGNATED = {"exp": ("direct", "yamabe"), "linear": ("yamabe",), "log": ("yamabe",),
              "power": (), "constant": ()}


class ScheduleError(ValueError):
    pass


# -- smooth cutoffs -----------------------------------------------------------------

def _h(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    pos = s > 0
    # -1/s may overflow to -inf for subnormal s; exp then gives the right limit 0
    with np.errstate(over="ignore"):
        out[pos] = np.exp(-1.0 / s[pos])
    return out


def smooth_step(s) -> np.ndarray:
    """C-infinity step: 0 for s <= 0, 1 for s >= 1, strictly increasing between."""
    s = np.asarray(s, dtype=float)
    a, b = _h(s), _h(1.0 - s)
    return a / (a + b)


def smooth_step_derivative(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    a, b = _h(s), _h(1.0 - s)
    with np.errstate(divide="ignore", invalid="ignore"):
        da = np.where(s > 0, a / np.maximum(s, 1e-300) ** 2, 0.0)
        db = np.where(1.0 - s > 0, b / np.maximum(1.0 - s, 1e-300) ** 2, 0.0)
    return (da * b + a * db) / (a + b) ** 2


# -- profiles -----------------------------------------------------------------------

@dataclass(frozen=True)
class Profile:
    """phi(t) for one boundary component from a closed-form family."""

    family: str
    c: float = 1.0
    power: float = 2.0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ScheduleError(f"unknown schedule family {self.family!r}")
        if self.c <= 0:
            raise ScheduleError("schedule constant must be positive")

    def derivative(self, t, order: int = 0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        c = self.c
        match self.family, order:
            case "exp", _:
                return c * np.exp(t)
            case "linear", 0:
                return c * (t + 1.0)
            case "linear", 1:
                return np.full_like(t, c)
            case "log", 0:
                return c * np.log(t + np.e)
            case "log", 1:
                return c / (t + np.e)
            case "log", 2:
                return -c / (t + np.e) ** 2
            case "power", _:
                k = self.power
                coef = np.prod([k - j for j in range(order)]) if order else 1.0
                return c * coef * (t + 1.0) ** (k - order)
            case "constant", 0:
                return np.full_like(t, c)
            case _:
                return np.zeros_like(t)

    def value(self, t):
        return self.derivative(t, 0)

    def rescaled(self, c: float) -> "Profile":
        return Profile(self.family, c, self.power)

    def describe(self) -> dict:
        out = {"family": self.family, "c": self.c}
        if self.family == "power":
            out["power"] = self.power
        return out


@dataclass(frozen=True, eq=False)
class HeatTrace:
    """Boundary trace of a semi-discrete heat flow: sum_j a_j exp(lam_j t)."""

    amplitudes: np.ndarray
    rates: np.ndarray

    def derivative(self, t, order: int = 0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        expo = np.exp(np.multiply.outer(t, self.rates))
        return expo @ (self.amplitudes * self.rates ** order)


@dataclass(frozen=True, eq=False)
class SplicedProfile:
    """(1 - eta) (xi + C t^(k+1/4)) + eta f with a smooth nondecreasing cutoff eta."""

    xi: HeatTrace
    tail: Profile
    t_half: float
    t_full: float
    k: int
    strict_c: float
    family: str = "spliced"

    def _eta(self, t, order: int):
        s = (np.asarray(t, dtype=float) - self.t_half) / (self.t_full - self.t_half)
        if order == 0:
            return smooth_step(s)
        return smooth_step_derivative(s) / (self.t_full - self.t_half)

    def short_time(self, t, order: int = 0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        a = self.k + 0.25
        coef = 1.0 if order == 0 else (a if order == 1 else a * (a - 1.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            extra = np.where(t > 0, self.strict_c * coef * np.maximum(t, 0.0) ** (a - order), 0.0)
        return self.xi.derivative(t, order) + extra

    def derivative(self, t, order: int = 0) -> np.ndarray:
        if order > 1:
            raise ScheduleError("spliced profiles provide value and first derivative only")
        t = np.asarray(t, dtype=float)
        eta = self._eta(t, 0)
        xi, f = self.short_time(t), self.tail.derivative(t)
        if order == 0:
            return (1.0 - eta) * xi + eta * f
        return ((1.0 - eta) * self.short_time(t, 1) + eta * self.tail.derivative(t, 1)
                + self._eta(t, 1) * (f - xi))

    def value(self, t):
        return self.derivative(t, 0)

    def describe(self) -> dict:
        return {"family": "spliced", "tail": self.tail.describe(), "t_half": self.t_half,
                "t_full": self.t_full, "k": self.k, "strict_c": self.strict_c}


@dataclass(frozen=True, eq=False)
class Schedule:
    """One profile per boundary component, in the order of ``geom.boundary_components``."""

    profiles: tuple
    names: tuple[str, ...]

    @classmethod
    def uniform(cls, geom: Geometry, profile) -> "Schedule":
        comps = geom.boundary_components
        return cls(tuple(profile for _ in comps), tuple(c.name for c in comps))

    def values(self, t: float) -> np.ndarray:
        return np.array([float(p.value(t)) for p in self.profiles])

    def rates(self, t: float) -> np.ndarray:
        return np.array([float(p.derivative(t, 1)) for p in self.profiles])

    @property
    def jet0(self) -> dict[str, tuple[float, float, float]]:
        out = {}
        for name, p in zip(self.names, self.profiles):
            if isinstance(p, SplicedProfile):
                second = float(p.short_time(0.0, 2)) if p.k >= 2 else float(p.xi.derivative(0.0, 2))
            else:
                second = float(p.derivative(0.0, 2))
            out[name] = (float(p.value(0.0)), float(p.derivative(0.0, 1)), second)
        return out

    def is_nondecreasing(self, t_from: float = 0.0, t_to: float = 10.0, samples: int = 4001) -> bool:
        ts = np.linspace(t_from, t_to, samples)
        return all(bool(np.all(np.diff(np.asarray(p.value(ts))) >= -1e-14 * np.abs(p.value(ts[1:]))))
                   for p in self.profiles)

    def describe(self) -> dict:
        return {name: p.describe() for name, p in zip(self.names, self.profiles)}


# -- growth certificates --------------------------------------------------------------------

def growth_certificate(schedule: Schedule, n: int, flow_kind: str, horizon: float,
                       beta: float = 1.01, t_from: float = 0.0, tol: float = 1e-8,
                       samples: int = 600) -> dict:
    """Sampled growth conditions of the boundary data.

    direct: gamma1 = phi^(n/(2-n)) phi_t must tend to 0; the tail value is the
    sample at the horizon once gamma1 is nonincreasing over the last quarter.
    yamabe: gamma2 = phi_t / phi must stay <= beta on [t_from, horizon].
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if flow_kind not in ("direct", "yamabe"):
        raise ValueError("flow_kind must be 'direct' or 'yamabe'")
    ts = np.unique(np.concatenate(([0.0, t_from], np.geomspace(1e-4, horizon, samples))))
    out = {"flow_kind": flow_kind, "horizon": horizon, "beta": beta, "t_from": t_from,
           "gradient_terms": "identically zero: boundary data is constant on each component",
           "components": {}}
    verdict = True
    for name, p in zip(schedule.names, schedule.profiles):
        phi = np.asarray(p.value(ts), dtype=float)
        dphi = np.asarray(p.derivative(ts, 1), dtype=float)
        quarter = ts >= 0.75 * horizon
        if not np.all(np.diff(phi[quarter]) > 0):
            raise ScheduleError(f"schedule on {name} is not eventually increasing")
        g1 = phi ** (n / (2.0 - n)) * dphi
        tail_g1 = g1[quarter]
        tail_sup = float(tail_g1[-1]) if np.all(np.diff(tail_g1) <= 0) else float(np.max(tail_g1))
        g2 = dphi / phi
        g2_sup = float(np.max(g2[ts >= t_from]))
        comp = {"gamma1_tail_sup": tail_sup, "gamma2_sup": g2_sup,
                "gamma2_sup_all": float(np.max(g2)), "phi_min": float(np.min(phi))}
        comp["pass"] = tail_sup < tol if flow_kind == "direct" else g2_sup <= beta
        verdict = verdict and comp["pass"] and comp["phi_min"] > 0
        out["components"][name] = comp
    out["pass"] = bool(verdict)
    return out


# -- compatibility jets ---------------------------------------------------------------------

@dataclass
class JetSpec:
    f0: Field
    f1: Field
    f2: Field | None = None
    boundary: dict[str, tuple[float, ...]] = field(default_factory=dict)
    aux: dict = field(default_factory=dict)

    def trace(self, order: int) -> np.ndarray:
        f = (self.f0, self.f1, self.f2)[order]
        return f.values[list(f.mesh.dirichlet)]


def _laplacian_everywhere(op: YamabeOperator, values) -> np.ndarray:
    return extrapolate_boundary(op.mesh, flux_divergence(op.mesh, values))


def _traces(mesh: Mesh, geom: Geometry, *fields_) -> dict[str, tuple[float, ...]]:
    rows = list(mesh.dirichlet)
    return {c.name: tuple(float(np.asarray(f)[rows[i]]) for f in fields_)
            for i, c in enumerate(geom.boundary_components)}


def direct_flow_jet(geom: Geometry, mesh: Mesh, u0) -> JetSpec:
    """u_t and u_tt at t = 0 for the direct flow started from u0."""
    u = values_of(u0)
    if np.any(u <= 0):
        raise ValueError("initial data must be positive")
    op = YamabeOperator.build(geom, mesh)
    v = op.c * _laplacian_everywhere(op, u) - op.R * u - op.nn1 * u ** op.p
    Lv = op.c * _laplacian_everywhere(op, v) - op.R * v - op.nn1 * op.p * u ** (op.p - 1) * v
    return JetSpec(mesh.field(u), mesh.field(v), mesh.field(Lv), _traces(mesh, geom, u, v, Lv))


def yamabe_flow_jet(geom: Geometry, mesh: Mesh, u0, zero_tol: float = 1e-10) -> JetSpec:
    """mu = u_t(0), L(mu) and the second time derivative forced at the boundary."""
    u = values_of(u0)
    if np.any(u <= 0):
        raise ValueError("initial data must be positive")
    op = YamabeOperator.build(geom, mesh)
    n = geom.n
    k = (n - 2.0) / (4.0 * (n - 1.0))
    q = 4.0 / (n - 2.0)
    mu = (n - 1.0) * u ** (-q) * (_laplacian_everywhere(op, u) - k * (op.R * u + op.nn1 * u ** op.p))
    Lmu = _laplacian_everywhere(op, mu) - k * (op.R + op.nn1 * op.p * u ** (op.p - 1.0)) * mu
    utt = u ** (-q) * ((n - 1.0) * Lmu - q * u ** ((6.0 - n) / (n - 2.0)) * mu ** 2)
    jet = JetSpec(mesh.field(u), mesh.field(mu), mesh.field(utt), _traces(mesh, geom, u, mu, utt))
    rows = list(mesh.dirichlet)
    flags = {}
    for i, c in enumerate(geom.boundary_components):
        if abs(mu[rows[i]]) <= zero_tol * max(1.0, u[rows[i]]):
            flags[c.name] = bool(Lmu[rows[i]] >= -zero_tol)
    jet.aux.update(L_mu=mesh.field(Lmu), condition_at_zero_mu=flags)
    return jet


# -- compatible boundary data ----------------------------------------------------------------

def _extended_geometry(geom: Geometry, ext: float) -> Geometry:
    lo, hi = geom.interval
    if geom.kind == "warped_ball":
        new = (lo, hi + ext)
    else:
        new = (lo - ext, hi + ext)
    if geom.kind == "warped_annulus" and geom.warp in ("euclidean", "hyperbolic", "spherical"):
        new = (max(new[0], 0.1 * lo), new[1])
    if geom.warp == "spherical":
        new = (new[0], min(new[1], 0.5 * (hi + np.pi)))
    return Geometry(geom.kind, geom.n, new, geom.warp, geom.a0, geom.kappa, geom.cross_volume,
                    geom.table)


def build_compatible_schedule(geom: Geometry, mesh: Mesh, u0, jet: JetSpec,
                              long_tail: Profile | None = None, k: int = 2,
                              strict: bool = True, horizon: float = 1e-3,
                              cells: int = 200) -> Schedule:
    """Boundary data whose first k time derivatives at t = 0 equal the jet traces.

    Iterated Poisson solves build a field whose Laplacian powers hit the jet
    traces on the boundary; it is continued into a collar outside the
    manifold, cut off smoothly and diffused by the heat flow with zero
    Dirichlet data on the enlarged domain. The boundary trace of that flow
    (plus C t^(k+1/4) when ``strict``) is spliced into ``long_tail`` on
    [horizon/2, horizon].
    """
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    long_tail = long_tail or Profile("exp")
    traces = [jet.trace(0), jet.trace(1)] + ([jet.trace(2)] if k == 2 else [])
    if k == 2 and jet.f2 is None:
        raise ScheduleError("k = 2 needs a second jet field")
    u_trace = values_of(u0)[list(mesh.dirichlet)]
    if np.max(np.abs(u_trace - traces[0])) > 1e-8 * max(1.0, float(np.max(np.abs(u_trace)))):
        raise ScheduleError("jet is inconsistent with the initial data on the boundary")

    # (i) iterated Poisson solves on a uniform working mesh
    work = build_mesh(geom, cells)
    lap = laplace_beltrami(geom, work)
    x = work.nodes
    comps = geom.boundary_components

    def boundary_interp(vals):
        if len(comps) == 1:
            return np.full_like(x, vals[0])
        return vals[0] + (vals[1] - vals[0]) * (x - x[0]) / (x[-1] - x[0])

    levels = [None] * (k + 1)
    levels[k] = boundary_interp(traces[k])
    for m in range(k, 0, -1):
        levels[m - 1] = solve_linear_dirichlet(lap, levels[m], traces[m - 1])

    # (ii) continue each level into a collar outside the manifold and cut off
    h = x[1] - x[0]
    ext_cells = int(np.ceil(geom.length / h))
    big = _extended_geometry(geom, ext_cells * h)
    n_lo = 0 if geom.kind == "warped_ball" else int(round((geom.x_lo - big.x_lo) / h))
    n_hi = int(round((big.x_hi - geom.x_hi) / h))
    nodes = np.concatenate((geom.x_lo - h * np.arange(n_lo, 0, -1), x,
                            geom.x_hi + h * np.arange(1, n_hi + 1)))
    nodes[0], nodes[-1] = big.x_lo, big.x_hi
    bmesh = mesh_from_nodes(big, nodes)
    blap = laplace_beltrami(big, bmesh)
    off = n_lo
    extended = []
    for m in range(k, -1, -1):
        vals = np.empty(bmesh.size)
        vals[off:off + x.size] = levels[m]
        if m == k:
            vals[:off] = levels[m][0]
            vals[off + x.size:] = levels[m][-1]
        else:
            rhs = extended[-1]
            vals = _march(blap, vals, rhs, off, off + x.size - 1)
        extended.append(vals)
    u_tilde = extended[-1]
    # each side is cut off in the outer part of its own collar, far enough from the
    # manifold that the heat kernel tail is negligible over the short-time window
    def cutoff(d, width):
        return 1.0 - smooth_step((np.maximum(d, 0.0) / width - 0.5) / 0.4)

    chi = cutoff(nodes - geom.x_hi, big.x_hi - geom.x_hi)
    if geom.kind != "warped_ball":
        chi *= cutoff(geom.x_lo - nodes, geom.x_lo - big.x_lo)
    start = chi * u_tilde
    start[list(bmesh.dirichlet)] = 0.0

    # (iii) heat flow with zero Dirichlet data, evaluated exactly by eigen-expansion
    d, offd, idx = blap.symmetric_interior()
    lam, Q = eigh_tridiagonal(d, offd)
    sv = np.sqrt(bmesh.quad_weights[idx])
    coeff = Q.T @ (sv * start[idx])
    profiles = []
    for ci, comp in enumerate(comps):
        node = off if comp.position == geom.x_lo else off + x.size - 1
        row = int(np.searchsorted(idx, node))
        amps = Q[row] / sv[row] * coeff
        xi = HeatTrace(amps, lam)
        # (iv) optional strictly positive correction
        c_strict = 1e-3 * max(1.0, abs(float(traces[0][ci]))) if strict else 0.0
        # (v) splice into the tail, scaling it to dominate on the splice window
        t_half, t_full = 0.5 * horizon, horizon
        window = np.linspace(t_half, t_full, 64)
        probe = SplicedProfile(xi, long_tail.rescaled(1.0), t_half, t_full, k, c_strict)
        ratio = probe.short_time(window) / long_tail.rescaled(1.0).value(window)
        c_tail = float(np.max(ratio)) * (1.0 + 1e-9)
        if c_tail <= 0:
            raise ScheduleError("short-time data is not positive on the splice window")
        profiles.append(SplicedProfile(xi, long_tail.rescaled(c_tail), t_half, t_full, k,
                                       c_strict))
    return Schedule(tuple(profiles), tuple(c.name for c in comps))


def _march(lap, vals, rhs, first: int, last: int) -> np.ndarray:
    """Extend a solution of Lap v = rhs beyond [first, last] by the three-point recurrence."""
    out = vals.copy()
    up, lo, diag = lap.upper, lap.lower, lap.diag
    # row i reads lo_i v_{i-1} + diag_i v_i + up_i v_{i+1} = rhs_i
    for i in range(last, out.size - 1):
        out[i + 1] = (rhs[i] - diag[i] * out[i] - lo[i] * out[i - 1]) / up[i]
    for i in range(first, 0, -1):
        out[i - 1] = (rhs[i] - diag[i] * out[i] - up[i] * out[i + 1]) / lo[i]
    return out


# -- barriers ---------------------------------------------------------------------------------

def lower_barrier(geom: Geometry, schedule: Schedule, c: float, x1: float) -> Callable:
    """psi(x, t) = c[(d + phi^(2/(2-n)))^((2-n)/2) - (x1 + phi^(2/(2-n)))^((2-n)/2)].

    ``d`` is the distance from ``x`` to the nearest boundary component and phi the
    data on that component.
    """
    if c <= 0 or x1 <= 0:
        raise ValueError("barrier constants must be positive")
    n = geom.n
    e_in, e_out = 2.0 / (2.0 - n), (2.0 - n) / 2.0
    comps = geom.boundary_components

    def psi(x, t):
        x = np.asarray(x, dtype=float)
        dists = np.stack([np.abs(x - cp.position) for cp in comps])
        nearest = np.argmin(dists, axis=0)
        d = np.min(dists, axis=0)
        phi = schedule.values(t)[nearest]
        off = phi ** e_in
        return c * ((d + off) ** e_out - (x1 + off) ** e_out)
    return psi


def upper_supersolution(n: int, R_loc: float, eps: float | None = None) -> Callable:
    """Local radial super-solution blowing up on the sphere of radius R_loc."""
    if eps is None:
        eps = R_loc / 10.0
    if eps <= 0 or R_loc <= 0:
        raise ValueError("radius and eps must be positive")

    def ubar(rho):
        rho = np.asarray(rho, dtype=float)
        if np.any(rho >= R_loc) or np.any(rho < 0):
            raise ValueError("rho must lie in [0, R_loc)")
        base = (2.0 * R_loc / (R_loc ** 2 - rho ** 2)) ** ((n - 2) / 2.0)
        return base * np.exp((n - 2) / 2.0 * (np.sqrt(R_loc ** 2 - rho ** 2 + eps ** 2) - eps))
    return ubar
