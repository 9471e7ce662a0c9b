import numpy as np
import pytest

from lnflow.discretization import (Field, MeshError, build_mesh, conformal_laplacian,
                                   extrapolate_boundary, flux_divergence, grad_energy, integrate,
                                   interior_sup, interpolate, laplace_beltrami, mesh_from_nodes,
                                   sup_norm)
from lnflow.elliptic import first_dirichlet_eigenpair, rayleigh_quotient
from lnflow.geometry import Geometry, scalar_curvature


def test_uniform_unit_interval_nodes():
    m = build_mesh(Geometry.slab(3, 1.0), 4, "uniform")
    assert np.allclose(m.nodes, [0, 0.25, 0.5, 0.75, 1.0])
    assert m.dirichlet == (0, 4)


def test_graded_spacing_bounds():
    m = build_mesh(Geometry.slab(3, 1.0), 2000, "graded")
    h = m.spacing
    assert min(h[0], h[-1]) < 1e-4
    assert np.max(h) < 2e-3
    assert np.all(h > 0)
    assert m.nodes[0] == 0.0 and m.nodes[-1] == 1.0


def test_graded_ball_refines_only_at_the_wall():
    m = build_mesh(Geometry.ball(3), 2000, "graded")
    h = m.spacing
    assert h[-1] < 1e-6 < h[0]
    assert m.dirichlet == (m.size - 1,)


def test_too_few_nodes_rejected():
    with pytest.raises(MeshError):
        build_mesh(Geometry.slab(3, 1.0), 2)


def test_ball_volume_quadrature():
    m = build_mesh(Geometry.ball(3), 2000, "graded")
    assert integrate(m.field(np.ones(m.size))) == pytest.approx(4 * np.pi / 3, abs=1e-8)


def test_slab_integrals():
    m = build_mesh(Geometry.slab(3, 10.0), 400)
    assert integrate(m.field(np.ones(m.size))) == pytest.approx(10.0, abs=1e-12)
    m1 = build_mesh(Geometry.slab(3, 1.0), 2000)
    u = m1.sample(lambda x: np.sin(np.pi * x))
    assert grad_energy(u) == pytest.approx(np.pi ** 2 / 2, abs=1e-4)


def test_interior_sup_example():
    g = Geometry.slab(3, 0.9, x_lo=0.1)
    m = build_mesh(g, 900)
    u = m.sample(lambda x: 1.0 / x)
    # only nodes at distance >= 0.4 from both walls count; the largest value is at x = 0.5
    assert interior_sup(u, 0.4) == pytest.approx(2.0, rel=1e-12)
    assert sup_norm(u) == pytest.approx(10.0)


def test_laplacian_of_constant_vanishes():
    for g in (Geometry.ball(3), Geometry.annulus(4, 0.5, 2.0, "hyperbolic"), Geometry.slab(5, 2.0)):
        m = build_mesh(g, 300, "graded")
        out = laplace_beltrami(g, m).apply(np.full(m.size, 3.7))
        assert np.max(np.abs(out)) < 1e-6 * np.max(np.abs(laplace_beltrami(g, m).diag))


def test_slab_sine_eigenfunction():
    L = 2.0
    g = Geometry.slab(3, L)
    m = build_mesh(g, 2000)
    u = np.sin(np.pi * m.nodes / L)
    lap = laplace_beltrami(g, m).apply(u)
    inner = m.interior & (u > 0.1)
    rel = np.abs(lap[inner] + (np.pi / L) ** 2 * u[inner]) / ((np.pi / L) ** 2 * u[inner])
    assert np.max(rel) < 1e-4


def test_ball_laplacian_of_r_squared():
    g = Geometry.ball(3)
    errs = []
    for M in (200, 400):
        m = build_mesh(g, M)
        lap = laplace_beltrami(g, m).apply(m.nodes ** 2)
        errs.append(np.max(np.abs(lap[m.interior] - 6.0)))
    assert errs[-1] < 1e-8


def test_conformal_laplacian_examples():
    L = 1.0
    g = Geometry.slab(3, L)
    m = build_mesh(g, 2000)
    u = np.sin(np.pi * m.nodes / L)
    Lu = conformal_laplacian(g, m).apply(u)
    inner = m.interior & (u > 0.1)
    assert np.allclose(Lu[inner], 8 * (np.pi / L) ** 2 * u[inner], rtol=1e-4)
    h = Geometry.ball(4, 1.0, "hyperbolic")
    mh = build_mesh(h, 300)
    out = conformal_laplacian(h, mh).apply(np.full(mh.size, 2.0))
    assert np.allclose(out[mh.interior], -12 * 2.0, rtol=1e-8)


def test_rayleigh_quotient_at_ground_state():
    g = Geometry.slab(3, 10.0, -2.0)
    m = build_mesh(g, 2000, "graded")
    lam, phi = first_dirichlet_eigenpair(g, m)
    assert rayleigh_quotient(g, m, phi) == pytest.approx(lam, abs=1e-10)


def test_m_matrix_structure():
    for g in (Geometry.ball(3), Geometry.slab(3, 2.0, -1.0), Geometry.ball(3, 1.0, "spherical")):
        m = build_mesh(g, 300, "graded")
        R = scalar_curvature(g).R(m.nodes)
        op = laplace_beltrami(g, m).scaled(-1.0).shifted(np.maximum(R, 0.0))
        assert op.is_m_matrix(tol=1e-14)  # row sums vanish up to rounding


def test_flux_divergence_matches_assembled_operator():
    g = Geometry.annulus(3, 0.5, 1.5)
    m = build_mesh(g, 200)
    u = np.cos(m.nodes)
    assert np.allclose(flux_divergence(m, u), laplace_beltrami(g, m).apply(u), atol=1e-10)


def test_extrapolation_is_exact_for_quadratics():
    g = Geometry.slab(3, 1.0)
    m = build_mesh(g, 50)
    q = 1 + 2 * m.nodes - 3 * m.nodes ** 2
    broken = q.copy()
    broken[[0, -1]] = 99.0
    assert np.allclose(extrapolate_boundary(m, broken), q, atol=1e-12)


def test_field_csv_round_trip(tmp_path):
    g = Geometry.ball(3)
    m = build_mesh(g, 30)
    f = m.sample(np.cos)
    path = tmp_path / "u.csv"
    f.to_csv(path)
    back = Field.read_csv(path, geom=g)
    assert np.array_equal(back.values, f.values)
    assert np.array_equal(back.mesh.nodes, m.nodes)


def test_field_rejects_bad_values():
    m = build_mesh(Geometry.slab(3, 1.0), 10)
    with pytest.raises(ValueError):
        m.field(np.ones(3))
    with pytest.raises(ValueError):
        m.field(np.full(m.size, np.nan))


def test_interpolation():
    m = build_mesh(Geometry.slab(3, 1.0), 100)
    u = m.sample(lambda x: x ** 2)
    assert interpolate(u, 0.5) == pytest.approx(0.25, abs=1e-6)


def test_mesh_from_nodes_requires_increasing():
    g = Geometry.slab(3, 1.0)
    with pytest.raises(MeshError):
        mesh_from_nodes(g, [0.0, 0.6, 0.5, 1.0])
