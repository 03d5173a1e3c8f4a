from __future__ import annotations

import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamlab.errors import ArgumentError, ClassificationError, DomainError, GeometryError
from beamlab.geometry import (InflowPoint, christoffel, classify_tangency, generate_fan, laplace_beltrami,
                              load_manifold, make_manifold, trace_geodesic, trace_many)


def fd_christoffel(m, x, step=1e-5):
    """Christoffel symbols from central differences of the metric matrix."""
    eye = np.eye(2)
    dg = np.stack([(m.metric(x + step * eye[l]) - m.metric(x - step * eye[l])) / (2 * step) for l in range(2)],
                  axis=-1)  # dg[a, b, l] = d_l g_ab
    gi = np.linalg.inv(m.metric(x))
    return 0.5 * (np.einsum("km,mji->kij", gi, dg) + np.einsum("km,mij->kij", gi, dg)
                  - np.einsum("km,ijm->kij", gi, dg))


# -- christoffel --------------------------------------------------------------

def test_christoffel_flat_is_zero(flat):
    pts = np.array([[0.0, 0.0], [0.3, -0.4], [-0.7, 0.1]])
    assert np.all(christoffel(flat, pts) == 0.0)


def test_christoffel_hyperbolic_origin_is_zero(hyperbolic):
    assert np.abs(christoffel(hyperbolic, np.zeros(2))).max() == 0.0


def test_christoffel_hyperbolic_matches_finite_differences(hyperbolic):
    x = np.array([0.3, 0.0])
    assert np.abs(christoffel(hyperbolic, x) - fd_christoffel(hyperbolic, x)).max() <= 1e-6


@settings(max_examples=30, deadline=None)
@given(r=st.floats(0.0, 0.45), th=st.floats(0.0, 2 * math.pi))
def test_christoffel_symmetry_and_metric_identity(hyperbolic, r, th):
    x = np.array([r * math.cos(th), r * math.sin(th)])
    G = christoffel(hyperbolic, x)
    assert np.allclose(G, np.swapaxes(G, 1, 2), atol=1e-12)
    # d_l g_ij = g_im G^m_jl + g_jm G^m_il
    g = hyperbolic.metric(x)
    step = 1e-5
    for l in range(2):
        e = np.eye(2)[l]
        dg = (hyperbolic.metric(x + step * e) - hyperbolic.metric(x - step * e)) / (2 * step)
        pred = np.einsum("im,mj->ij", g, G[:, :, l]) + np.einsum("jm,mi->ij", g, G[:, :, l])
        assert np.allclose(dg, pred, rtol=1e-6, atol=1e-6)


def test_christoffel_outside_chart_is_domain_error(hyperbolic):
    with pytest.raises(DomainError):
        christoffel(hyperbolic, np.array([1.2, 0.0]))


def test_grid_metric_reproduces_analytic_christoffels(hyperbolic):
    xs = np.linspace(-0.6, 0.6, 61)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    P = np.stack([X, Y], axis=-1)
    g = hyperbolic.metric(P)
    spec = {"grid": {"lo": [-0.6, -0.6], "hi": [0.6, 0.6], "g11": g[..., 0, 0].tolist(),
                     "g12": g[..., 0, 1].tolist(), "g22": g[..., 1, 1].tolist()},
            "domain": {"type": "disk", "center": [0.0, 0.0], "radius": 0.5}}
    m = make_manifold("custom-grid", spec)
    x = np.array([[0.2, 0.1], [-0.1, 0.3]])
    ref = hyperbolic.metric.christoffel(x)
    assert np.abs(m.metric.christoffel(x) - ref).max() <= 1e-3 * np.abs(ref).max()


def test_non_positive_grid_metric_rejected():
    n = 8
    g11 = np.ones((n, n))
    g11[3, 3] = -1.0
    spec = {"grid": {"lo": [-1, -1], "hi": [1, 1], "g11": g11.tolist(), "g12": np.zeros((n, n)).tolist(),
                     "g22": np.ones((n, n)).tolist()}}
    with pytest.raises(GeometryError):
        make_manifold("custom-grid", spec)


def test_manifold_spec_requires_metric_kind():
    with pytest.raises(ArgumentError):
        load_manifold({"params": {}})
    with pytest.raises(ArgumentError):
        make_manifold("torus")


# -- trace_geodesic -------------------------------------------------------------

def test_flat_diameters_and_chord(flat):
    d1 = trace_geodesic(flat, flat.inflow_point([-1, 0], [1, 0]), 1e-3, 10)
    d2 = trace_geodesic(flat, flat.inflow_point([0, -1], [0, 1]), 1e-3, 10)
    ch = trace_geodesic(flat, flat.inflow_point([-math.sqrt(0.75), 0.5], [1, 0]), 1e-3, 10)
    assert abs(d1.exit_time - 2.0) <= 1e-6
    assert abs(d2.exit_time - 2.0) <= 1e-6
    assert abs(ch.exit_time - math.sqrt(3.0)) <= 1e-6
    assert np.allclose(d1.x[-1], [1.0, 0.0], atol=1e-9)


@pytest.mark.parametrize("kind,x0", [("euclidean-disk", [-1.0, 0.0]), ("hyperbolic-disk", [-0.5, 0.0]),
                                     ("radial-herglotz", [-1.0, 0.0])])
def test_energy_conservation(kind, x0):
    m = make_manifold(kind)
    path = trace_geodesic(m, m.inflow_point(x0, [1.0, 0.3]), 1e-3, 20)
    assert np.abs(m.norm(path.x, path.v) - 1.0).max() <= 1e-6


@pytest.mark.parametrize("kind,x0,tol", [("euclidean-disk", [-1.0, 0.0], 1e-5), ("hyperbolic-disk", [-0.5, 0.0], 1e-4),
                                         ("radial-herglotz", [-1.0, 0.0], 1e-4)])
def test_reversibility(kind, x0, tol):
    m = make_manifold(kind)
    fwd = trace_geodesic(m, m.inflow_point(x0, [1.0, 0.3]), 1e-3, 20)
    back = trace_geodesic(m, InflowPoint(fwd.x[-1], -fwd.v[-1]), 1e-3, 20)
    assert np.abs(back.x[-1] - fwd.x[0]).max() <= tol
    assert abs(back.exit_time - fwd.exit_time) <= tol


@pytest.mark.parametrize("kind,x0", [("hyperbolic-disk", [-0.5, 0.0]), ("radial-herglotz", [-1.0, 0.0])])
def test_exit_time_converges_at_fourth_order(kind, x0):
    m = make_manifold(kind)
    p = m.inflow_point(x0, [1.0, 0.3])
    taus = [trace_geodesic(m, p, s, 20).exit_time for s in (0.08, 0.04, 0.02, 0.01)]
    diffs = np.abs(np.diff(taus))
    assert np.all(diffs[:-1] / diffs[1:] >= 8.0)


def test_trapped_flag_and_classification_error(flat):
    path = trace_geodesic(flat, flat.inflow_point([-1, 0], [1, 0]), 0.01, 1.0)
    assert path.trapped and path.tangency == "trapped" and math.isinf(path.exit_time)
    with pytest.raises(ClassificationError):
        classify_tangency(path, flat)


def test_trace_argument_errors(flat):
    p = flat.inflow_point([-1, 0], [1, 0])
    with pytest.raises(ArgumentError):
        trace_geodesic(flat, p, 0.0, 10)
    with pytest.raises(ArgumentError):
        trace_geodesic(flat, p, -0.1, 10)
    with pytest.raises(ArgumentError):
        flat.inflow_point([-1, 0], [-1, 0])


def test_geodesic_csv_columns(flat, tmp_path):
    path = trace_geodesic(flat, flat.inflow_point([-1, 0], [1, 0]), 0.1, 10)
    path.to_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "tau,x1,x2,v1,v2"
    assert len(lines) == len(path.tau) + 1


def test_trace_many_matches_single(hyperbolic):
    pts = [hyperbolic.inflow_point([-0.5, 0.0], [1.0, s]) for s in (-0.4, 0.0, 0.5)]
    many = trace_many(hyperbolic, pts, 0.01, 20)
    for p, path in zip(pts, many):
        one = trace_geodesic(hyperbolic, p, 0.01, 20)
        assert one.exit_time == path.exit_time
        assert np.array_equal(one.x, path.x)


def test_geodesic_kernel_runtime(flat):
    t0 = time.perf_counter()
    trace_geodesic(flat, flat.inflow_point([-1, 0], [1, 0]), 1e-3, 10)
    assert time.perf_counter() - t0 < 1.0


# -- classify_tangency ------------------------------------------------------------

def test_tangency_tags(flat):
    dia = trace_geodesic(flat, flat.inflow_point([-1, 0], [1, 0]), 0.01, 10)
    assert classify_tangency(dia, flat) == "non_tangential"
    chord = trace_geodesic(flat, flat.inflow_point([-math.sqrt(0.75), 0.5], [1, 0]), 0.01, 10)
    assert classify_tangency(chord, flat) == "non_tangential"
    assert abs(chord.entry_cos + math.sqrt(3) / 2) <= 1e-12
    ang = math.radians(89.99)
    xi = np.array([math.cos(ang), math.sin(ang)])  # measured from the inward normal (1, 0)
    graze = trace_geodesic(flat, InflowPoint(np.array([-1.0, 0.0]), xi), 1e-3, 10)
    assert classify_tangency(graze, flat) == "tangential_entry"


# -- generate_fan ------------------------------------------------------------------

def test_fan_counts_and_incoming(flat):
    pts, params = generate_fan(flat, 4, 2)
    assert len(pts) == 8
    assert all(flat.inner(p.x, p.xi, flat.outward_normal(p.x)) < 0 for p in pts)
    pts, params = generate_fan(flat, 64, 32)
    assert len(pts) == 2048
    keys = {(round(p.x[0], 12), round(p.x[1], 12), round(p.xi[0], 12), round(p.xi[1], 12)) for p in pts}
    assert len(keys) == 2048
    angles = np.array([a for _, a in params])
    assert abs(np.abs(angles).max() - (math.pi / 2 - 0.05)) <= 1e-14


def test_fan_argument_errors(flat):
    with pytest.raises(ArgumentError):
        generate_fan(flat, 3, 2)
    with pytest.raises(ArgumentError):
        generate_fan(flat, 4, 1)


@settings(max_examples=20, deadline=None)
@given(nb=st.integers(4, 24), na=st.integers(2, 12))
def test_fan_points_strictly_incoming(hyperbolic, nb, na):
    pts, _ = generate_fan(hyperbolic, nb, na)
    assert len(pts) == nb * na
    for p in pts:
        assert hyperbolic.inner(p.x, p.xi, hyperbolic.outward_normal(p.x)) < 0
        assert abs(hyperbolic.norm(p.x, p.xi) - 1.0) <= 1e-12


# -- conformal reduction helpers ---------------------------------------------------------

def test_laplace_beltrami_flat_quadratic():
    X = np.array([[0.1, 0.2, -0.3], [0.0, 0.4, 0.1]])
    val = laplace_beltrami(lambda P: np.broadcast_to(np.eye(3), P.shape[:-1] + (3, 3)),
                           lambda P: np.sum(P**2, axis=-1), X)
    assert np.allclose(val, 6.0, atol=1e-6)
