"""Energies on conformal factors and the scalar-curvature sign change pipeline.

* ``escobar_Q``: boundary-normalized Yamabe quotient
  [int |du|^2 + k R u^2 dV + (n-2)/2 int_bdry H u^2 dS] / (int_bdry |u|^(2(n-1)/(n-2)) dS)^((n-2)/(n-1)).
* ``appendix_E``: the energy whose critical points solve the Dirichlet Yamabe
  problem on a background with R = -n(n-1).
* ``flatten_scalar`` / ``positivize_scalar``: conformal factors making R = 0,
  then R = f > 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .discretization import (Field, Mesh, conformal_laplacian, flux_divergence, grad_energy,
                             integrate, values_of)
from .elliptic import (EllipticSolveReport, SolverError, damped_newton, first_dirichlet_eigenpair,
                       solve_linear_dirichlet, solve_yamabe_dirichlet)
from .geometry import Geometry, mean_curvature, scalar_curvature, volume_weight


@dataclass
class EnergyReport:
    value: float
    gradient: float
    curvature: float
    boundary: float
    denominator: float
    description: dict = field(default_factory=dict)

    @property
    def numerator(self) -> float:
        return self.gradient + self.curvature + self.boundary

    def to_dict(self) -> dict:
        out = asdict(self)
        out["numerator"] = self.numerator
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _boundary_data(geom: Geometry, mesh: Mesh, u: np.ndarray):
    w = volume_weight(geom)
    for comp in geom.boundary_components:
        i = mesh.boundary_index(comp)
        area = float(w(np.array([comp.position]))[0])
        yield comp, u[i], area


def escobar_Q(geom: Geometry, mesh: Mesh, u) -> EnergyReport:
    n = geom.n
    vals = values_of(u)
    f = mesh.field(vals)
    R = scalar_curvature(geom).R(mesh.nodes)
    grad = grad_energy(f)
    curv = (n - 2) / (4.0 * (n - 1)) * integrate(R * vals ** 2, mesh=mesh)
    bdry = 0.0
    denom_sum = 0.0
    for comp, ub, area in _boundary_data(geom, mesh, vals):
        bdry += 0.5 * (n - 2) * mean_curvature(geom, comp) * ub ** 2 * area
        denom_sum += abs(ub) ** (2.0 * (n - 1) / (n - 2)) * area
    if denom_sum <= 0:
        raise ValueError("u has zero boundary trace; the quotient is undefined")
    denom = denom_sum ** ((n - 2) / (n - 1))
    return EnergyReport((grad + curv + bdry) / denom, grad, curv, bdry, denom,
                        {"geometry": geom.describe(), "nodes": mesh.size})


def normalizing_factor(geom: Geometry, mesh: Mesh) -> np.ndarray | None:
    """W with R(W^(4/(n-2)) g) = -n(n-1) and W = 1 on the boundary; None if g already has it."""
    R = scalar_curvature(geom).R(mesh.nodes)
    if np.allclose(R, -geom.n * (geom.n - 1), rtol=0, atol=1e-12):
        return None
    return solve_yamabe_dirichlet(geom, mesh, 1.0).solution.values


def appendix_E(geom: Geometry, mesh: Mesh, u, background="auto") -> float:
    """E(u) = (2(n-1)/(n-2)) int |du|^2 + int n(n-1)/2 (-u^2 + (n-2)/n |u|^(2n/(n-2))).

    The integrals are taken in the metric W^(4/(n-2)) g with R = -n(n-1); ``u``
    is the factor relative to that metric. ``background`` is W as an array,
    ``"auto"`` to solve for it, or None to require that g is already normalized.
    """
    n = geom.n
    vals = values_of(u)
    if isinstance(background, str):
        if background != "auto":
            raise ValueError("background must be an array, 'auto' or None")
        W = normalizing_factor(geom, mesh)
    elif background is None:
        R = scalar_curvature(geom).R(mesh.nodes)
        if not np.allclose(R, -n * (n - 1), rtol=0, atol=1e-12):
            raise ValueError("background is not normalized and no conformal factor was given")
        W = None
    else:
        W = values_of(background)
    du = np.diff(vals)
    if W is None:
        grad = float(np.sum(mesh.flux * du ** 2))
        density = np.ones_like(vals)
    else:
        Wmid = 0.5 * (W[1:] + W[:-1])
        grad = float(np.sum(mesh.flux * Wmid ** 2 * du ** 2))
        density = W ** (2.0 * n / (n - 2))
    pot = 0.5 * n * (n - 1) * (-vals ** 2 + (n - 2) / n * np.abs(vals) ** (2.0 * n / (n - 2)))
    return 2.0 * (n - 1) / (n - 2) * grad + integrate(density * pot, mesh=mesh)


def q_blowup_probe(geom: Geometry, mesh: Mesh, eps_grid=None) -> dict:
    """Q(phi_1 + eps) along a decreasing grid of eps."""
    if eps_grid is None:
        eps_grid = np.geomspace(1e-1, 1e-4, 7)
    eps = np.asarray(eps_grid, dtype=float)
    if np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise ValueError("eps_grid must be positive and strictly decreasing")
    lam, phi = first_dirichlet_eigenpair(geom, mesh)
    base = phi.values.copy()
    base[list(mesh.dirichlet)] = 0.0
    Q = np.array([escobar_Q(geom, mesh, base + e).value for e in eps])
    tail = Q[len(Q) // 2:]
    diverges = bool(Q[-1] < -10.0 * abs(Q[0]) and np.all(np.diff(tail) < 0))
    return {"lambda1": float(lam), "eps": eps.tolist(), "Q": Q.tolist(),
            "min_Q": float(np.min(Q)), "diverges": diverges}


def q_probe_csv(report: dict) -> str:
    rows = ["eps,Q"] + [f"{e:.17g},{q:.17g}" for e, q in zip(report["eps"], report["Q"])]
    return "\n".join(rows) + "\n"


@dataclass
class FlattenResult:
    solution: Field
    residual_sup: float
    scalar_curvature: np.ndarray
    lambda1: float
    augmented: Field | None = None
    augment_constant: float | None = None
    augmented_R_min: float | None = None


def _scaled_operator_residual(op, u: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    r = op.apply(u) - rhs
    scale = 1.0 + np.abs(op.diag) * np.abs(u) + np.abs(rhs)
    r[list(op.dirichlet)] = 0.0
    return r / scale


def _apply_conformal(geom: Geometry, mesh: Mesh, u: np.ndarray) -> np.ndarray:
    R = scalar_curvature(geom).R(mesh.nodes)
    Lu = -geom.conformal_coefficient * flux_divergence(mesh, u) + R * u
    Lu[list(mesh.dirichlet)] = 0.0
    return Lu


def _new_scalar_curvature(geom: Geometry, mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """u^(-p) L_g u: scalar curvature of u^(4/(n-2)) g at interior nodes (0 on the boundary)."""
    return u ** (-geom.critical_exponent) * _apply_conformal(geom, mesh, u)


def flatten_scalar(geom: Geometry, mesh: Mesh, augment: bool = False) -> FlattenResult:
    """Solve L_g u = 0 with u = 1 on the boundary, so u^(4/(n-2)) g has zero scalar curvature.

    With ``augment``, also return 2(u + C phi_1) with C >= 0 chosen so that
    u + C phi_1 > 1/2; its scalar curvature 2 C lam_1 phi_1 / (...)^p is nonnegative.
    """
    lam, phi = first_dirichlet_eigenpair(geom, mesh)
    if lam <= 0:
        raise ValueError(f"first eigenvalue {lam:.6g} of the conformal Laplacian is not positive; "
                         "a scalar-flat conformal factor need not exist")
    L = conformal_laplacian(geom, mesh)
    zero = np.zeros(mesh.size)
    u = values_of(solve_linear_dirichlet(L, zero, 1.0, geom, mesh))
    res = float(np.max(np.abs(_scaled_operator_residual(L, u, zero))))
    if np.min(u) <= 0:
        raise SolverError("scalar-flat factor is not positive")
    Rnew = _new_scalar_curvature(geom, mesh, u)
    out = FlattenResult(mesh.field(u), res, Rnew, float(lam))
    if augment:
        ph = phi.values.copy()
        inner = mesh.interior & (ph > 0)
        C = max(0.0, float(np.max((0.5 + 1e-3 - u[inner]) / ph[inner]))) if inner.any() else 0.0
        aug = 2.0 * (u + C * np.where(mesh.interior, ph, 0.0))
        R_aug = _new_scalar_curvature(geom, mesh, aug)
        out.augmented = mesh.field(aug)
        out.augment_constant = C
        out.augmented_R_min = float(np.min(R_aug[mesh.interior]))
    return out


def positivize_scalar(geom: Geometry, mesh: Mesh, f: float, background=None,
                      f_max: float | None = None, tol: float = 1e-13) -> EllipticSolveReport:
    """Solve -c Lap_h v = f v^p, v = 1 on the boundary, on a scalar-flat background h.

    ``background`` is the factor xi with h = xi^(4/(n-2)) g (from ``flatten_scalar``);
    without it g itself must be scalar-flat. The product U = xi v then solves
    L_g U = f U^p, so the metric v^(4/(n-2)) h has scalar curvature exactly f.
    """
    n = geom.n
    p = geom.critical_exponent
    L = conformal_laplacian(geom, mesh)
    if background is None:
        if not np.allclose(scalar_curvature(geom).R(mesh.nodes), 0.0, rtol=0, atol=1e-12):
            raise ValueError("background is not scalar-flat; pass the flattening factor")
        xi = np.ones(mesh.size)
    else:
        xi = values_of(background)
    if f < 0:
        raise ValueError("f must be nonnegative")
    if f_max is None:
        f_max = 0.1 * first_dirichlet_eigenpair(geom, mesh)[0]
    if f > f_max:
        raise ValueError(f"f = {f:.3g} exceeds the admissible size {f_max:.3g}")
    rows = list(mesh.dirichlet)

    def residual(U):
        G = f * U ** p - _apply_conformal(geom, mesh, U)
        G[rows] = 0.0
        return G

    def scale(U):
        return 1.0 + np.abs(L.diag) * U + f * U ** p

    def jacobian(U):
        return L.scaled(-1.0).banded(f * p * U ** (p - 1.0))

    result = damped_newton(residual, jacobian, scale, xi.copy(), tol, max_iter=100)
    v = result.u / xi
    report = EllipticSolveReport(mesh.field(v), result.iterations, result.residual,
                                 float(np.min(result.u)), converged=result.converged)
    if not result.converged or np.min(result.u) <= 0:
        raise SolverError(f"Newton iteration for f = {f:.3g} did not converge", report)
    U = result.u
    # a few undamped steps drive the residual down to rounding level
    for _ in range(5):
        G = residual(U)
        trial = U + solve_banded((1, 1), jacobian(U), -G)
        if np.max(np.abs(residual(trial))) >= np.max(np.abs(G)):
            break
        U = trial
    v = U / xi
    report.solution = mesh.field(v)
    Rnew = _new_scalar_curvature(geom, mesh, U)
    inner = mesh.interior
    report.extra.update(f=f, R_new=Rnew, R_new_max_deviation=float(np.max(np.abs(Rnew[inner] - f))),
                        sup_deviation_from_one=float(np.max(np.abs(v - 1.0))), n=n)
    return report
