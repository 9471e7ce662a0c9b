"""Randomized invariants of the discretization, solvers and schedules."""

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from lnflow.discretization import (build_mesh, flux_divergence, integrate, laplace_beltrami,
                                   mesh_from_nodes)
from lnflow.elliptic import solve_linear_dirichlet, solve_yamabe_dirichlet
from lnflow.functionals import escobar_Q
from lnflow.geometry import Geometry, scalar_curvature
from lnflow.schedules import Profile, Schedule, lower_barrier, smooth_step

dims = st.integers(3, 6)
warps = st.sampled_from(["euclidean", "hyperbolic", "spherical"])


@st.composite
def geometries(draw):
    n = draw(dims)
    kind = draw(st.sampled_from(["ball", "annulus", "slab"]))
    if kind == "ball":
        warp = draw(warps)
        return Geometry.ball(n, draw(st.floats(0.3, 1.2)), warp)
    if kind == "annulus":
        inner = draw(st.floats(0.2, 1.0))
        warp = draw(st.sampled_from(["euclidean", "hyperbolic"]))
        return Geometry.annulus(n, inner, inner + draw(st.floats(0.3, 1.5)), warp)
    return Geometry.slab(n, draw(st.floats(0.5, 10.0)), draw(st.floats(-3.0, 3.0)))


@given(geometries(), st.integers(20, 400), st.sampled_from(["uniform", "graded"]))
def test_mesh_is_strictly_increasing_and_spans_the_interval(g, M, grading):
    m = build_mesh(g, M, grading)
    assert np.all(np.diff(m.nodes) > 0)
    assert m.nodes[0] == g.x_lo and m.nodes[-1] == g.x_hi
    assert np.all(m.quad_weights > 0)


@given(geometries(), st.integers(20, 300), st.floats(-5.0, 5.0))
def test_laplacian_of_constants_vanishes(g, M, c):
    m = build_mesh(g, M, "graded")
    assert np.all(flux_divergence(m, np.full(m.size, c)) == 0.0)


@given(geometries(), st.integers(20, 200), st.integers(0, 2 ** 31))
def test_laplacian_is_self_adjoint(g, M, seed):
    m = build_mesh(g, M)
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, m.size))
    u[list(m.dirichlet)] = 0.0
    v[list(m.dirichlet)] = 0.0
    lap = laplace_beltrami(g, m)
    a = integrate(lap.apply(u) * v, mesh=m)
    b = integrate(u * lap.apply(v), mesh=m)
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a), abs(b))


@given(geometries(), st.integers(20, 300))
def test_shifted_laplacian_is_an_m_matrix(g, M):
    m = build_mesh(g, M, "graded")
    R = scalar_curvature(g).R(m.nodes)
    op = laplace_beltrami(g, m).scaled(-1.0).shifted(np.maximum(R, 0.0))
    assert op.is_m_matrix(tol=1e-14)


@given(geometries(), st.integers(0, 2 ** 31))
def test_maximum_principle(g, seed):
    m = build_mesh(g, 200)
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.0, 5.0, m.size)
    rhs = rng.uniform(0.0, 2.0, m.size)
    op = laplace_beltrami(g, m).scaled(-1.0).shifted(c)
    f = solve_linear_dirichlet(op, rhs, rng.uniform(0.0, 1.0))
    assert np.min(f) >= -1e-10


@given(geometries(), st.floats(0.05, 3.0), st.floats(1.0, 4.0))
def test_yamabe_solutions_are_ordered_by_boundary_data(g, low, ratio):
    m = build_mesh(g, 150, "graded")
    a = solve_yamabe_dirichlet(g, m, low * ratio).solution.values
    b = solve_yamabe_dirichlet(g, m, low).solution.values
    assert np.min(a - b) >= -1e-10 * np.max(a)


@given(geometries(), st.sampled_from([0.5, 2.0, 10.0]), st.integers(0, 2 ** 31))
def test_Q_is_homogeneous_of_degree_zero(g, lam, seed):
    m = build_mesh(g, 120)
    u = np.random.default_rng(seed).uniform(0.2, 2.0, m.size)
    q = escobar_Q(g, m, u).value
    assert abs(escobar_Q(g, m, lam * u).value - q) <= 1e-12 * max(1.0, abs(q))


@given(st.lists(st.floats(-1.0, 2.0), min_size=2, max_size=50))
def test_smooth_step_is_monotone_and_bounded(s):
    s = np.sort(np.asarray(s))
    y = smooth_step(s)
    assert np.all((0.0 <= y) & (y <= 1.0))
    assert np.all(np.diff(y) >= 0)


@given(st.sampled_from(["exp", "linear", "log", "power", "constant"]), st.floats(0.1, 10.0),
       st.floats(1.0, 3.0))
def test_profiles_are_nondecreasing_from_their_start(family, c, power):
    p = Profile(family, c, power)
    ts = np.linspace(0.0, 10.0, 201)
    v = p.value(ts)
    assert v[0] == np.float64(p.value(0.0))
    assert np.all(np.diff(v) >= 0)
    assert Schedule.uniform(Geometry.ball(3), p).is_nondecreasing()


@given(dims, st.floats(0.02, 0.3), st.floats(0.0, 40.0))
def test_lower_barrier_vanishes_at_the_collar_edge(n, x1, t):
    g = Geometry.ball(n)
    psi = lower_barrier(g, Schedule.uniform(g, Profile("exp")), 1.0, x1)
    # both terms are of size x1^((2-n)/2), so rounding is relative to that
    assert abs(psi(np.array([1.0 - x1]), t)[0]) <= 1e-13 * x1 ** ((2 - n) / 2)


@given(st.integers(3, 5), st.integers(30, 200))
def test_custom_nodes_reproduce_built_mesh(n, M):
    g = Geometry.ball(n, 0.8, "hyperbolic")
    m = build_mesh(g, M, "graded")
    again = mesh_from_nodes(g, m.nodes)
    assert np.allclose(again.quad_weights, m.quad_weights, rtol=1e-14, atol=0)
    assert np.allclose(again.flux, m.flux, rtol=1e-14, atol=0)
