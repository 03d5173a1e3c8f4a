from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from beamlab.cli import spatial_function
from beamlab.errors import ArgumentError, ConditioningError, ConfigurationError
from beamlab.geometry import InflowPoint, generate_fan, make_manifold
from beamlab.raytransform import (RayBundle, ScalarField, adjoint_transform, conjugate_gradient, forward_transform,
                                  invert_transform, keys_weights, sinogram_from_csv)

OFFSETS = [0.0, 0.3, 0.5, 0.8]


def one(x):
    return np.ones(np.shape(x)[:-1])


def bump(x):
    return np.exp(-np.sum((x - np.array([0.1, 0.2])) ** 2, axis=-1) / (2 * 0.3**2))


@pytest.fixture(scope="module")
def chord_fan(flat):
    fan = [flat.inflow_point([-math.sqrt(1 - p * p), p], [1, 0]) for p in OFFSETS]
    return fan, np.array([2 * math.sqrt(1 - p * p) for p in OFFSETS])


@pytest.fixture(scope="module")
def fan_64(flat):
    fan, prm = generate_fan(flat, 64, 32)
    return RayBundle(flat, fan, 0.01, params=prm)


def test_keys_weights_partition_of_unity():
    t = np.linspace(0, 1, 11, endpoint=False)
    w = keys_weights(t)
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-14)
    assert np.allclose(w @ np.arange(4.0), 1 + t, atol=1e-14)  # reproduces linear data


def test_chord_lengths(flat, chord_fan):
    fan, L = chord_fan
    assert np.abs(forward_transform(flat, one, 0.0, fan).values - L).max() <= 1e-6
    grid = ScalarField.on_manifold(flat, (64, 64), one)
    assert np.abs(forward_transform(flat, grid, 0.0, fan).values - L).max() <= 1e-6


@pytest.mark.parametrize("a", [0.7, -0.4])
def test_constant_attenuation_closed_form(flat, chord_fan, a):
    fan, L = chord_fan
    sino = forward_transform(flat, one, a, fan)
    assert np.abs(sino.values - np.expm1(a * L) / a).max() <= 1e-6


def test_bump_against_adaptive_quadrature(flat, chord_fan):
    fan, L = chord_fan
    sino = forward_transform(flat, bump, 0.1, fan)
    for k, p in enumerate(OFFSETS):
        x0 = -math.sqrt(1 - p * p)
        ref, _ = quad(lambda t: math.exp(0.1 * t) * bump(np.array([x0 + t, p])), 0, L[k], epsabs=1e-14, epsrel=1e-13)
        assert abs(sino.values[k] - ref) <= 1e-7 * abs(ref)


@pytest.mark.parametrize("kind", ["euclidean-disk", "hyperbolic-disk", "radial-herglotz"])
def test_adjoint_dot_product(kind):
    m = make_manifold(kind)
    fan, prm = generate_fan(m, 8, 4)
    bundle = RayBundle(m, fan, 0.01, params=prm)
    grid = ScalarField.on_manifold(m, (8, 8))
    rng = np.random.default_rng(3)
    f = grid.like(rng.standard_normal(grid.shape))
    g = rng.standard_normal(len(fan))
    sino = forward_transform(m, f, 0.3, None, bundle=bundle)
    back = adjoint_transform(m, sino.with_values(g), grid)
    lhs = np.dot(np.where(sino.ok, sino.values, 0), g)
    rhs = np.sum(f.values * back.values)
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))


def test_zero_sinogram_backprojects_to_zero(flat, fan_64):
    grid = ScalarField.on_manifold(flat, (16, 16))
    sino = forward_transform(flat, grid, 0.0, None, bundle=fan_64)
    assert np.all(adjoint_transform(flat, sino, grid).values == 0)


def test_single_ray_backprojection_support(flat):
    p = 0.3
    bundle = RayBundle(flat, [flat.inflow_point([-math.sqrt(1 - p * p), p], [1, 0])], 0.01)
    grid = ScalarField.on_manifold(flat, (32, 32))
    sino = forward_transform(flat, grid, 0.0, None, bundle=bundle).with_values(np.array([1.0]))
    back = adjoint_transform(flat, sino, grid)
    X = grid.nodes()
    hit = np.abs(back.values) > 0
    dy = grid.spacing[1]
    # Keys interpolation reaches two cells either side of the ray
    assert hit.any() and np.all(np.abs(X[..., 1][hit] - p) <= 2 * dy + 1e-12)


def test_empty_sinogram_rejected(flat):
    bundle = RayBundle(flat, [flat.inflow_point([-1, 0], [1, 0])], 0.01)
    grid = ScalarField.on_manifold(flat, (8, 8))
    sino = forward_transform(flat, grid, 0.0, None, bundle=bundle)
    sino.values = sino.values[:0]
    with pytest.raises(ArgumentError):
        adjoint_transform(flat, sino, grid)


@settings(max_examples=15, deadline=None)
@given(c1=st.floats(-5, 5), c2=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_linearity(flat, c1, c2, seed):
    fan, _ = generate_fan(flat, 8, 4)
    bundle = RayBundle(flat, fan, 0.02)
    grid = ScalarField.on_manifold(flat, (8, 8))
    rng = np.random.default_rng(seed)
    f1, f2 = grid.like(rng.standard_normal(grid.shape)), grid.like(rng.standard_normal(grid.shape))
    s = forward_transform(flat, f1.like(c1 * f1.values + c2 * f2.values), 0.2, None, bundle=bundle).values
    s1 = forward_transform(flat, f1, 0.2, None, bundle=bundle).values
    s2 = forward_transform(flat, f2, 0.2, None, bundle=bundle).values
    assert np.abs(s - (c1 * s1 + c2 * s2)).max() <= 1e-12 * max(1.0, np.abs(s).max())


def test_distinct_bumps_are_distinguished(flat, fan_64):
    f1 = spatial_function({"kind": "bump", "center": [0.1, -0.1], "radius": 0.4})
    f2 = spatial_function({"kind": "bump", "center": [0.15, -0.1], "radius": 0.4})
    d = forward_transform(flat, f1, 0.0, None, bundle=fan_64).values - forward_transform(flat, f2, 0.0, None,
                                                                                        bundle=fan_64).values
    assert np.linalg.norm(d) >= 1e-3


def test_tangential_and_trapped_rays_are_flagged(flat):
    ang = math.radians(89.99)
    graze = InflowPoint(np.array([-1.0, 0.0]), np.array([math.cos(ang), math.sin(ang)]))
    bundle = RayBundle(flat, [flat.inflow_point([-1, 0], [1, 0]), graze], 0.001, max_len=10)
    sino = forward_transform(flat, one, 0.0, None, bundle=bundle)
    assert sino.flags == ["non_tangential", "tangential_entry"]
    assert sino.values[1] == 0 and abs(sino.values[0] - 2) <= 1e-6
    short = RayBundle(flat, [flat.inflow_point([-1, 0], [1, 0])], 0.01, max_len=1.0)
    assert short.flags == ["trapped"]


def test_variable_attenuation_rejected(flat, chord_fan):
    with pytest.raises(ArgumentError):
        forward_transform(flat, one, np.array([0.1, 0.2]), chord_fan[0])
    with pytest.raises(ArgumentError):
        forward_transform(flat, one, 0.1j, chord_fan[0])


# -- inversion ------------------------------------------------------------------------

@pytest.mark.parametrize("a,bound", [(0.0, 0.05), (0.2, 0.07)])
def test_bump_round_trip(flat, fan_64, a, bound):
    truth = ScalarField.on_manifold(flat, (64, 64), spatial_function(
        {"kind": "bump", "center": [0.1, -0.1], "radius": 0.6})).masked(flat)
    sino = forward_transform(flat, truth, a, None, bundle=fan_64)
    _, rep = invert_transform(flat, sino, ScalarField.on_manifold(flat, (64, 64)), reg=1e-4, iters=500, truth=truth)
    assert rep.converged and rep.rel_error_if_truth_given <= bound
    assert np.all(np.diff(rep.residual_history) <= 1e-12)  # conjugate residual is monotone


def test_zero_data_inverts_to_zero(flat, fan_64):
    grid = ScalarField.on_manifold(flat, (16, 16))
    sino = forward_transform(flat, grid, 0.0, None, bundle=fan_64)
    rec, rep = invert_transform(flat, sino, grid)
    assert np.all(rec.values == 0) and rep.converged


def test_inversion_is_deterministic(flat):
    fan, prm = generate_fan(flat, 16, 8)
    bundle = RayBundle(flat, fan, 0.02, params=prm)
    grid = ScalarField.on_manifold(flat, (16, 16))
    sino = forward_transform(flat, bump, 0.1, None, bundle=bundle)
    r1, _ = invert_transform(flat, sino, grid, iters=50)
    r2, _ = invert_transform(flat, sino, grid, iters=50)
    assert np.array_equal(r1.values, r2.values)


def test_attenuation_bound_enforced(flat, fan_64):
    grid = ScalarField.on_manifold(flat, (16, 16))
    sino = forward_transform(flat, grid, 1.5, None, bundle=fan_64)
    with pytest.raises(ConfigurationError):
        invert_transform(flat, sino, grid)
    invert_transform(flat, sino, grid, a_max=2.0, iters=5)


def test_indefinite_operator_is_a_conditioning_error():
    N = np.diag([1.0, -1.0, 2.0])
    with pytest.raises(ConditioningError):
        conjugate_gradient(lambda v: N @ v, np.array([1.0, 1.0, 1.0]), 10)


def test_conjugate_residual_solves_spd_system():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((30, 30))
    N = A @ A.T + 30 * np.eye(30)
    b = rng.standard_normal((30, 2))
    x, hist, conv = conjugate_gradient(lambda v: N @ v, b, 200, tol=1e-12)
    assert conv and np.abs(N @ x - b).max() <= 1e-9
    assert np.all(np.diff(np.array(hist), axis=0) <= 1e-15)


def test_sinogram_csv_round_trip(flat, tmp_path):
    fan, prm = generate_fan(flat, 8, 4)
    bundle = RayBundle(flat, fan, 0.02, params=prm)
    sino = forward_transform(flat, bump, 0.0, None, bundle=bundle)
    sino.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "boundary_param,angle,re,im,flag" and len(lines) == 33
    back = sinogram_from_csv(tmp_path / "s.csv", bundle)
    assert np.array_equal(back.values, sino.values)
