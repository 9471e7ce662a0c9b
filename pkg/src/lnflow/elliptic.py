"""Stationary solvers: linear Dirichlet problems, the Yamabe Dirichlet problem,
the first Dirichlet eigenpair of the conformal Laplacian, the largest
homogeneous solution and reference solutions with infinite boundary data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, solve_banded, solveh_banded

from .discretization import (DiscreteOperator, Field, Mesh, conformal_laplacian, interior_mask,
                             laplace_beltrami, values_of)
from .geometry import Geometry, scalar_curvature


class SolverError(RuntimeError):
    def __init__(self, message: str, report: "EllipticSolveReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass
class EllipticSolveReport:
    solution: Field
    newton_iterations: int
    residual_sup: float
    positivity_min: float
    continuation_path: list[float] | None = None
    converged: bool = True
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "newton_iterations": int(self.newton_iterations),
            "residual_sup": float(self.residual_sup),
            "positivity_min": float(self.positivity_min),
            "continuation_path": None if self.continuation_path is None
            else [float(k) for k in self.continuation_path],
            "converged": bool(self.converged),
            **{k: v for k, v in self.extra.items() if isinstance(v, (int, float, str, bool))},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def boundary_vector(geom: Geometry, mesh: Mesh, bc) -> np.ndarray:
    """Boundary values ordered like ``mesh.dirichlet`` from a scalar, sequence or name map."""
    comps = geom.boundary_components
    if isinstance(bc, dict):
        vals = [float(bc[c.name]) for c in comps]
    elif np.ndim(bc) == 0:
        vals = [float(bc)] * len(comps)
    else:
        vals = [float(b) for b in bc]
        if len(vals) != len(comps):
            raise ValueError("need one boundary value per component")
    return np.array(vals)


# -- the semilinear operator shared with the flows -------------------------------------

@dataclass(frozen=True, eq=False)
class YamabeOperator:
    """F(u) = c Lap u - R u - n(n-1) u^p with c = 4(n-1)/(n-2), p = (n+2)/(n-2)."""

    geom: Geometry
    mesh: Mesh
    lap: DiscreteOperator
    R: np.ndarray

    @classmethod
    def build(cls, geom: Geometry, mesh: Mesh) -> "YamabeOperator":
        return cls(geom, mesh, laplace_beltrami(geom, mesh),
                   scalar_curvature(geom).R(mesh.nodes))

    @property
    def c(self) -> float:
        return self.geom.conformal_coefficient

    @property
    def p(self) -> float:
        return self.geom.critical_exponent

    @property
    def nn1(self) -> float:
        return float(self.geom.n * (self.geom.n - 1))

    def residual(self, u) -> np.ndarray:
        u = values_of(u)
        F = self.c * self.lap.apply(u) - self.R * u - self.nn1 * np.abs(u) ** self.p * np.sign(u)
        F[list(self.mesh.dirichlet)] = 0.0
        return F

    def reaction_derivative(self, u) -> np.ndarray:
        return -self.R - self.nn1 * self.p * np.abs(values_of(u)) ** (self.p - 1.0)

    def scale(self, u) -> np.ndarray:
        """Magnitude of the individual terms of F, used to normalize residuals."""
        u = np.abs(values_of(u))
        return 1.0 + self.c * np.abs(self.lap.diag) * u + np.abs(self.R) * u + self.nn1 * u ** self.p

    def scaled_residual(self, u) -> float:
        return float(np.max(np.abs(self.residual(u)) / self.scale(u)))


@dataclass
class NewtonResult:
    u: np.ndarray
    iterations: int
    residual: float
    converged: bool


def damped_newton(residual, jacobian, scale, u0: np.ndarray, tol: float,
                  max_iter: int = 60) -> NewtonResult:
    """Newton's method for tridiagonal systems with a positivity line search.

    ``residual(u)`` vanishes on fixed rows, ``jacobian(u)`` returns the banded
    (3, N) matrix with identity fixed rows and ``scale(u)`` normalizes residuals.
    Steps are halved until the iterate stays >= half its current minimum and the
    scaled residual decreases.
    """
    u = u0.copy()
    F = residual(u)
    res = float(np.max(np.abs(F) / scale(u)))
    it = 0
    while res > tol and it < max_iter:
        it += 1
        try:
            delta = solve_banded((1, 1), jacobian(u), -F)
        except (LinAlgError, ValueError):
            return NewtonResult(u, it, res, False)
        if not np.all(np.isfinite(delta)):
            return NewtonResult(u, it, res, False)
        floor = 0.5 * np.min(u)
        alpha = 1.0
        while alpha > 1e-10:
            trial = u + alpha * delta
            if np.min(trial) >= floor:
                Ft = residual(trial)
                rt = float(np.max(np.abs(Ft) / scale(trial)))
                if rt < res or rt <= tol:
                    break
            alpha *= 0.5
        else:
            return NewtonResult(u, it, res, False)
        u, F, res = trial, Ft, rt
    return NewtonResult(u, it, res, res <= tol)


def implicit_direct_step(op: YamabeOperator, u: np.ndarray, dt: float, bvals: np.ndarray,
                         tol: float, max_iter: int = 60) -> NewtonResult:
    """One backward-Euler step of u_t = F(u) with Dirichlet values ``bvals``."""
    rows = list(op.mesh.dirichlet)
    target = np.asarray(bvals, dtype=float)
    start = u.copy()
    start[rows] = target

    def residual(v):
        G = op.residual(v) - (v - u) / dt
        G[rows] = 0.0
        return G

    def scale(v):
        return op.scale(v) + (np.abs(v) + np.abs(u)) / dt

    def jacobian(v):
        return op.lap.scaled(op.c).banded(op.reaction_derivative(v) - 1.0 / dt)

    return damped_newton(residual, jacobian, scale, start, tol, max_iter)


# -- linear problems -------------------------------------------------------------------

def solve_linear_dirichlet(op: DiscreteOperator, rhs, bc, geom: Geometry | None = None,
                           mesh: Mesh | None = None) -> Field | np.ndarray:
    """Solve ``op u = rhs`` on interior rows with ``u = bc`` on the boundary rows."""
    b = values_of(rhs).copy()
    rows = list(op.dirichlet)
    if geom is not None and mesh is not None:
        b[rows] = boundary_vector(geom, mesh, bc)
    else:
        b[rows] = np.broadcast_to(np.asarray(bc, dtype=float), (len(rows),))
    try:
        u = solve_banded((1, 1), op.banded(), b)
    except LinAlgError as exc:
        raise SolverError(f"singular system: {exc}") from exc
    if not np.all(np.isfinite(u)):
        raise SolverError("singular system: non-finite solution")
    r = op.apply(u) - values_of(rhs)
    r[rows] = u[rows] - b[rows]
    size = np.abs(op.diag) * np.abs(u) + np.abs(values_of(rhs)) + np.abs(u)
    if np.max(np.abs(r)) > 1e-9 * max(np.max(size), 1e-300):
        raise SolverError("singular or ill-conditioned system: residual check failed")
    return mesh.field(u) if mesh is not None else u


# -- Yamabe Dirichlet problem ------------------------------------------------------------

def supersolution_level(geom: Geometry, mesh: Mesh, bc) -> float:
    """A constant that dominates every positive solution with these boundary values."""
    R = scalar_curvature(geom).R(mesh.nodes)
    neg = max(-float(np.min(R)), 0.0) / (geom.n * (geom.n - 1))
    return max(float(np.max(boundary_vector(geom, mesh, bc))), neg ** ((geom.n - 2) / 4.0))


def solve_yamabe_dirichlet(geom: Geometry, mesh: Mesh, bc, init=None, tol: float = 1e-12,
                           max_iter: int = 80) -> EllipticSolveReport:
    """Positive solution of c Lap w - R w - n(n-1) w^p = 0 with w = bc on the boundary.

    Residuals are measured relative to the size of the individual terms.
    """
    bvals = boundary_vector(geom, mesh, bc)
    if np.any(bvals <= 0):
        raise ValueError("boundary data must be positive")
    op = YamabeOperator.build(geom, mesh)
    rows = list(mesh.dirichlet)
    if init is None:
        u = np.full(mesh.size, supersolution_level(geom, mesh, bc))
    else:
        u = np.maximum(values_of(init).copy(), 1e-300)
    u[rows] = bvals

    def residual(v):
        return op.residual(v)

    def jacobian(v):
        return op.lap.scaled(op.c).banded(op.reaction_derivative(v))

    result = damped_newton(residual, jacobian, op.scale, u, tol, max_iter)
    iterations = result.iterations
    if not result.converged:
        u, extra_it = _pseudo_transient(op, result.u, bvals, tol)
        iterations += extra_it
        result = damped_newton(residual, jacobian, op.scale, u, tol, max_iter)
        iterations += result.iterations
    report = EllipticSolveReport(mesh.field(result.u), iterations, result.residual,
                                 float(np.min(result.u)), converged=result.converged)
    if not result.converged:
        raise SolverError(f"Yamabe Dirichlet solve did not converge (residual {result.residual:.3e})",
                          report)
    return report


def _pseudo_transient(op: YamabeOperator, u: np.ndarray, bvals: np.ndarray, tol: float,
                      max_steps: int = 400) -> tuple[np.ndarray, int]:
    """Backward-Euler steps of the direct flow with growing time step toward steady state."""
    dt = 1e-4
    total = 0
    for _ in range(max_steps):
        step = implicit_direct_step(op, u, dt, bvals, tol=1e-11)
        total += step.iterations
        if not step.converged:
            dt *= 0.25
            if dt < 1e-14:
                break
            continue
        u = step.u
        if op.scaled_residual(u) < max(1e-6, tol):
            break
        dt = min(dt * 2.0, 1e8)
    return u, total


# -- eigenproblem -------------------------------------------------------------------------

def first_dirichlet_eigenpair(geom: Geometry, mesh: Mesh, tol: float = 1e-12,
                              max_iter: int = 500) -> tuple[float, Field]:
    """Smallest Dirichlet eigenvalue of the conformal Laplacian and its positive eigenfunction.

    Inverse iteration on the V-symmetrized interior matrix, shifted below the
    lower bound min R (the stiffness part is nonnegative). The eigenvalue is
    read from the energy form, which stays accurate when strong grading makes
    the matrix entries span many orders of magnitude.
    """
    L = conformal_laplacian(geom, mesh)
    d, off, idx = L.symmetric_interior()
    R = scalar_curvature(geom).R(mesh.nodes)[idx]
    floor = float(np.min(R))
    shift = floor - 1e-2 * max(1.0, abs(floor))
    ab = np.zeros((2, d.size))
    ab[0, 1:] = off
    ab[1] = d - shift
    sw = np.sqrt(L.weights[idx])
    y = sw / np.linalg.norm(sw)
    lam = np.inf
    for _ in range(max_iter):
        z = solveh_banded(ab, y)
        z /= np.linalg.norm(z)
        if z.sum() < 0:
            z = -z
        phi = np.zeros(mesh.size)
        phi[idx] = z / sw
        lam_new = rayleigh_quotient(geom, mesh, phi)
        moved = float(np.linalg.norm(z - y))
        done = abs(lam_new - lam) <= tol * max(abs(lam_new), 1.0) and moved <= np.sqrt(tol)
        lam, y = lam_new, z
        if done:
            break
    else:
        raise SolverError(f"inverse iteration did not converge (last update {moved:.3e})")
    phi /= np.max(np.abs(phi))
    return lam, mesh.field(phi)


def rayleigh_quotient(geom: Geometry, mesh: Mesh, u) -> float:
    """(c int |du|^2 + int R u^2) / int u^2 with the boundary values of ``u`` taken as 0."""
    v = values_of(u).copy()
    v[list(mesh.dirichlet)] = 0.0
    V = mesh.quad_weights
    R = scalar_curvature(geom).R(mesh.nodes)
    energy = geom.conformal_coefficient * np.sum(mesh.flux * np.diff(v) ** 2) + np.sum(V * R * v * v)
    return float(energy / np.sum(V * v * v))


# -- largest homogeneous solution ------------------------------------------------------------

def largest_homogeneous_solution(geom: Geometry, mesh: Mesh, j_max: int = 2 ** 14,
                                 tol: float = 1e-7) -> EllipticSolveReport:
    """Limit of the decreasing solutions with boundary data 1/j, j = 1, 2, 4, ..., j_max.

    The returned candidate is the last member computed (boundary value 1/j_final).
    """
    margin = _default_margin(mesh)
    mask = interior_mask(mesh, margin)
    j = 1
    rep = solve_yamabe_dirichlet(geom, mesh, 1.0)
    path = [1.0]
    iters = rep.newton_iterations
    sups = [float(np.max(rep.solution.values))]
    decreasing = True
    worst_increase = 0.0
    prev = rep.solution.values
    while j < j_max:
        j *= 2
        rep = solve_yamabe_dirichlet(geom, mesh, 1.0 / j, init=prev)
        iters += rep.newton_iterations
        cur = rep.solution.values
        path.append(1.0 / j)
        sups.append(float(np.max(cur)))
        increase = float(np.max(cur - prev))
        worst_increase = max(worst_increase, increase)
        if increase > 1e-10:
            decreasing = False
        change = float(np.max(np.abs(cur - prev)[mask]))
        prev = cur
        if change < tol:
            break
    out = EllipticSolveReport(rep.solution, iters, rep.residual_sup, rep.positivity_min,
                              continuation_path=path)
    out.extra.update(decreasing=decreasing, worst_increase=worst_increase, j_final=j,
                     interior_sup=float(np.max(prev[mask])), sups=sups, margin=margin)
    return out


def _default_margin(mesh: Mesh) -> float:
    extent = float(np.max(mesh.dist))
    return 0.05 * extent


# -- infinite boundary data --------------------------------------------------------------------

def default_k_schedule(geom: Geometry, mesh: Mesh) -> list[float]:
    """Doubling K until the boundary offset K^(-2/(n-2)) reaches ~10 wall spacings."""
    q = 2.0 / (geom.n - 2.0)
    h_wall = float(np.min(mesh.spacing[[0, -1]]))
    ks = [1.0]
    while ks[-1] ** (-q) > 10.0 * h_wall and len(ks) < 40:
        ks.append(2.0 * ks[-1])
    return ks


def loewner_nirenberg_reference(geom: Geometry, mesh: Mesh, K_schedule=None,
                                margin: float = 0.05) -> EllipticSolveReport:
    """Interior limit of Dirichlet solutions as the boundary data K doubles.

    The last two solutions are combined by Richardson extrapolation in
    K^(-2/(n-2)) on the region at distance >= margin from the boundary.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    ks = list(K_schedule) if K_schedule is not None else default_k_schedule(geom, mesh)
    if len(ks) < 2:
        raise ValueError("need at least two boundary levels")
    q = 2.0 / (geom.n - 2.0)
    prev = None
    sols = []
    iters = 0
    monotone = True
    for K in ks:
        rep = solve_yamabe_dirichlet(geom, mesh, K, init=prev)
        iters += rep.newton_iterations
        if prev is not None and np.max(prev - rep.solution.values) > 1e-10 * np.max(prev):
            monotone = False
        prev = rep.solution.values
        sols.append(prev)
    if not monotone:
        raise SolverError("boundary-data sequence is not pointwise increasing (discretization fault)",
                          rep)
    mask = interior_mask(mesh, margin)
    ratio = (ks[-1] / ks[-2]) ** q
    limit = sols[-1].copy()
    limit[mask] = (ratio * sols[-1][mask] - sols[-2][mask]) / (ratio - 1.0)
    out = EllipticSolveReport(mesh.field(limit), iters, rep.residual_sup, float(np.min(limit)),
                              continuation_path=[float(k) for k in ks])
    out.extra.update(margin=margin, richardson_correction=float(np.max(np.abs(limit - sols[-1]))))
    return out


def exact_ball_ln(n: int, radius: float = 1.0, geom: Geometry | None = None):
    """r -> (2 R/(R^2 - r^2))^((n-2)/2), the complete hyperbolic factor of a euclidean ball."""
    if geom is not None and (geom.kind != "warped_ball" or geom.warp != "euclidean"):
        raise ValueError("closed form only available on a euclidean ball")

    def u(r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return (2.0 * radius / (radius ** 2 - r ** 2)) ** ((n - 2) / 2.0)
    return u
