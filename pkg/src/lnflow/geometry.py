"""Radially reducible geometries and their curvature and measure data.

Every geometry is a metric of the form ``dx^2 + a(x)^2 g_N`` on an interval,
either warped over the round unit sphere (ball, annulus) or a product with a
fixed constant-curvature cross-section (slab). All PDEs reduce to problems in
the single coordinate ``x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import gamma

KINDS = ("warped_ball", "warped_annulus", "product_slab")
WARPS = ("euclidean", "spherical", "hyperbolic", "constant", "custom")

ArrayFn = Callable[[np.ndarray], np.ndarray]


class GeometryError(ValueError):
    """Raised when a geometry violates its structural invariants."""


def sphere_volume(dim: int) -> float:
    """Volume of the unit ``dim``-sphere, 2 pi^((dim+1)/2) / Gamma((dim+1)/2)."""
    m = dim + 1
    return float(2.0 * np.pi ** (m / 2.0) / gamma(m / 2.0))


@dataclass(frozen=True)
class BoundaryComponent:
    position: float
    outward_sign: int
    name: str


@dataclass(frozen=True)
class Geometry:
    """Immutable description of a radially reducible compact manifold."""

    kind: str
    n: int
    interval: tuple[float, float]
    warp: str | None = None
    a0: float = 1.0
    kappa: float = 0.0
    cross_volume: float = 1.0
    table: tuple[tuple[float, ...], tuple[float, ...]] | None = None
    _spline: CubicSpline | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise GeometryError(f"unknown geometry kind {self.kind!r}")
        if int(self.n) != self.n or self.n < 3:
            raise GeometryError("dimension must be an integer n >= 3")
        lo, hi = map(float, self.interval)
        if not hi > lo:
            raise GeometryError("interval must satisfy x_lo < x_hi")
        object.__setattr__(self, "interval", (lo, hi))
        if self.kind == "product_slab":
            if not np.isfinite(self.kappa):
                raise GeometryError("cross-section curvature must be finite")
            if self.cross_volume <= 0:
                raise GeometryError("cross_volume must be positive")
            return
        if self.warp not in WARPS:
            raise GeometryError(f"unknown warp profile {self.warp!r}")
        if self.warp == "custom":
            if self.table is None:
                raise GeometryError("custom warp needs a table of (x, a) samples")
            xs, ys = (np.asarray(v, dtype=float) for v in self.table)
            if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 4:
                raise GeometryError("custom warp table needs matching arrays of >= 4 samples")
            if xs[0] > lo + 1e-12 or xs[-1] < hi - 1e-12:
                raise GeometryError("custom warp table must cover the interval")
            object.__setattr__(self, "_spline", CubicSpline(xs, ys))
        if self.kind == "warped_ball":
            if lo != 0.0:
                raise GeometryError("warped_ball must start at x_lo = 0")
            if abs(self.a(np.array([0.0]))[0]) > 1e-8:
                raise GeometryError("warped_ball needs a(0) = 0")
            if abs(self.da(np.array([0.0]))[0] - 1.0) > 1e-6:
                raise GeometryError("warped_ball needs a'(0) = 1")
            probe = np.linspace(lo, hi, 2001)[1:]
        else:
            probe = np.linspace(lo, hi, 2001)
        if np.any(self.a(probe) <= 0):
            raise GeometryError("warp profile must be positive on the interval")

    # -- constructors -----------------------------------------------------
    @classmethod
    def ball(cls, n: int, radius: float = 1.0, warp: str = "euclidean", table=None) -> "Geometry":
        return cls("warped_ball", n, (0.0, radius), warp=warp, table=table)

    @classmethod
    def annulus(cls, n: int, inner: float, outer: float, warp: str = "euclidean",
                a0: float = 1.0, table=None) -> "Geometry":
        return cls("warped_annulus", n, (inner, outer), warp=warp, a0=a0, table=table)

    @classmethod
    def slab(cls, n: int, length: float, kappa: float = 0.0, cross_volume: float = 1.0,
             x_lo: float = 0.0) -> "Geometry":
        return cls("product_slab", n, (x_lo, x_lo + length), kappa=kappa,
                   cross_volume=cross_volume)

    # -- basic data ---------------------------------------------------------
    @property
    def x_lo(self) -> float:
        return self.interval[0]

    @property
    def x_hi(self) -> float:
        return self.interval[1]

    @property
    def length(self) -> float:
        return self.interval[1] - self.interval[0]

    @property
    def critical_exponent(self) -> float:
        """(n+2)/(n-2)."""
        return (self.n + 2.0) / (self.n - 2.0)

    @property
    def conformal_coefficient(self) -> float:
        """4(n-1)/(n-2), the Laplacian weight in the conformal Laplacian."""
        return 4.0 * (self.n - 1.0) / (self.n - 2.0)

    @property
    def boundary_components(self) -> tuple[BoundaryComponent, ...]:
        outer = BoundaryComponent(self.x_hi, +1, "outer")
        if self.kind == "warped_ball":
            return (outer,)
        return (BoundaryComponent(self.x_lo, -1, "inner"), outer)

    def component(self, which) -> BoundaryComponent:
        if isinstance(which, BoundaryComponent):
            return which
        comps = self.boundary_components
        if isinstance(which, (int, np.integer)) and -len(comps) <= which < len(comps):
            return comps[which]
        for comp in comps:
            if which == comp.name:
                return comp
        raise GeometryError(f"{which!r} is not a boundary component")

    # -- warp profile -------------------------------------------------------
    def a(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "product_slab":
            return np.ones_like(x)
        match self.warp:
            case "euclidean":
                return x.copy()
            case "spherical":
                return np.sin(x)
            case "hyperbolic":
                return np.sinh(x)
            case "constant":
                return np.full_like(x, self.a0)
            case _:
                return self._spline(x)

    def da(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "product_slab":
            return np.zeros_like(x)
        match self.warp:
            case "euclidean":
                return np.ones_like(x)
            case "spherical":
                return np.cos(x)
            case "hyperbolic":
                return np.cosh(x)
            case "constant":
                return np.zeros_like(x)
            case _:
                return self._spline(x, 1)

    def d2a(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "product_slab":
            return np.zeros_like(x)
        match self.warp:
            case "euclidean" | "constant":
                return np.zeros_like(x)
            case "spherical":
                return -np.sin(x)
            case "hyperbolic":
                return np.sinh(x)
            case _:
                return self._spline(x, 2)

    def distance_to_boundary(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = np.full_like(x, np.inf)
        for comp in self.boundary_components:
            d = np.minimum(d, np.abs(x - comp.position))
        return d

    def describe(self) -> dict:
        out = {"kind": self.kind, "n": self.n, "interval": list(self.interval)}
        if self.kind == "product_slab":
            out.update(kappa=self.kappa, cross_volume=self.cross_volume)
        else:
            out["warp"] = self.warp
            if self.warp == "constant":
                out["a0"] = self.a0
        return out


@dataclass(frozen=True)
class CurvatureData:
    R: ArrayFn
    drift: ArrayFn
    H: dict[str, float]
    dist_to_boundary: ArrayFn


def warped_scalar_curvature(n: int, a, da, d2a) -> np.ndarray:
    """-2(n-1) a''/a + (n-1)(n-2)(1 - a'^2)/a^2 for a warp over the round sphere."""
    return -2.0 * (n - 1) * d2a / a + (n - 1) * (n - 2) * (1.0 - da ** 2) / a ** 2


def scalar_curvature(geom: Geometry) -> CurvatureData:
    n = geom.n
    if geom.kind == "product_slab":
        def R(x):
            return np.full_like(np.asarray(x, dtype=float), geom.kappa)

        def drift(x):
            return np.zeros_like(np.asarray(x, dtype=float))
    else:
        closed = {
            "euclidean": 0.0,
            "spherical": float(n * (n - 1)),
            "hyperbolic": -float(n * (n - 1)),
            "constant": (n - 1) * (n - 2) / geom.a0 ** 2,
        }
        if geom.warp in closed:
            value = closed[geom.warp]

            def R(x):
                return np.full_like(np.asarray(x, dtype=float), value)
        else:
            floor = 1e-6 * geom.length if geom.kind == "warped_ball" else -np.inf

            def R(x):
                # the center of a custom ball is a removable 0/0; sample just off it
                x = np.maximum(np.asarray(x, dtype=float), floor)
                return warped_scalar_curvature(n, geom.a(x), geom.da(x), geom.d2a(x))

        def drift(x):
            x = np.asarray(x, dtype=float)
            with np.errstate(divide="ignore", invalid="ignore"):
                match geom.warp:
                    case "euclidean":
                        b = (n - 1) / x
                    case "spherical":
                        b = (n - 1) / np.tan(x)
                    case "hyperbolic":
                        b = (n - 1) / np.tanh(x)
                    case _:
                        b = (n - 1) * geom.da(x) / geom.a(x)
            if geom.kind == "warped_ball":
                b = np.where(x == 0.0, np.inf, b)
            return b

    H = {c.name: mean_curvature(geom, c) for c in geom.boundary_components}
    return CurvatureData(R=R, drift=drift, H=H, dist_to_boundary=geom.distance_to_boundary)


def mean_curvature(geom: Geometry, component) -> float:
    """Trace of the second fundamental form at a boundary component (outward normal)."""
    comp = geom.component(component)
    if geom.kind == "product_slab":
        return 0.0
    x = np.array([comp.position])
    return float((geom.n - 1) * comp.outward_sign * geom.da(x)[0] / geom.a(x)[0])


def volume_weight(geom: Geometry) -> ArrayFn:
    """Density w(x) with dV = w(x) dx; boundary area of a component is w(x_b)."""
    if geom.kind == "product_slab":
        vn = geom.cross_volume

        def w(x):
            return np.full_like(np.asarray(x, dtype=float), vn)
        return w
    omega = sphere_volume(geom.n - 1)

    def w(x):
        return omega * geom.a(x) ** (geom.n - 1)
    return w


def lambda1_closed_form(geom: Geometry) -> float | None:
    """First Dirichlet eigenvalue of the conformal Laplacian on a slab; None otherwise."""
    if geom.kind != "product_slab":
        return None
    return geom.conformal_coefficient * (np.pi / geom.length) ** 2 + geom.kappa
