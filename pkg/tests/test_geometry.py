import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radarflow.core import (
    DegenerateConfigurationError, LengthMismatchError, OriginPointError, RadarFrame, RigidTransform,
    TooFewPointsError,
)
from radarflow.geometry import (
    SphericalResolution, cartesian_to_spherical, kabsch, knn, nearest_neighbors, pairwise_sq_dists,
    point_resolution, random_rotation, spherical_jacobian, spherical_to_cartesian, transform_to_flow,
    warp, yaw_rotation,
)


def _reflection_branch_taken(src, dst):
    H = (src - src.mean(0)).T @ (dst - dst.mean(0))
    U, _, Vt = np.linalg.svd(H)
    return np.linalg.det(Vt.T @ U.T) < 0


def test_kabsch_identity():
    x = np.random.default_rng(0).normal(size=(10, 3))
    t = kabsch(x, x)
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, 0, atol=1e-12)


def test_kabsch_pure_translation():
    x = np.random.default_rng(1).normal(size=(10, 3))
    t = kabsch(x, x + [1.0, -2.0, 0.5])
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, [1.0, -2.0, 0.5], atol=1e-12)


def test_kabsch_yaw_90():
    x = np.random.default_rng(2).normal(size=(8, 3))
    R = yaw_rotation(np.pi / 2)
    t = kabsch(x, x @ R.T)
    assert np.allclose(t.rotation, R, atol=1e-12)


def test_kabsch_planar_cloud_uses_reflection_fix():
    # a flat cloud leaves the sign of the last singular vector free, so some
    # draws need the determinant correction; all must still recover R
    rng = np.random.default_rng(3)
    hits = 0
    for _ in range(50):
        x = np.column_stack([rng.normal(size=(10, 2)), np.zeros(10)])
        R = random_rotation(rng)
        y = x @ R.T + rng.normal(size=3)
        hits += _reflection_branch_taken(x, y)
        t = kabsch(x, y)
        assert np.abs(t.rotation - R).max() < 1e-9
        assert np.linalg.det(t.rotation) > 0
    assert hits > 0


def test_kabsch_errors():
    with pytest.raises(TooFewPointsError):
        kabsch(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(LengthMismatchError):
        kabsch(np.zeros((3, 3)), np.zeros((4, 3)))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfigurationError):
        kabsch(line, line + 1.0)
    with pytest.raises(DegenerateConfigurationError):
        kabsch(np.ones((4, 3)), np.ones((4, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 30))
def test_kabsch_recovers_constructed_transform(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3)) * rng.uniform(0.5, 20)
    gt = RigidTransform(random_rotation(rng), rng.normal(size=3) * 10)
    t = kabsch(x, gt.apply(x))
    assert np.abs(t.rotation - gt.rotation).max() < 1e-8
    assert np.abs(t.translation - gt.translation).max() < 1e-7
    assert t.is_valid()


def test_transform_to_flow_and_warp():
    x = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    t = RigidTransform(yaw_rotation(np.pi / 2), np.array([0.0, 0.0, 1.0]))
    f = transform_to_flow(t, x)
    assert np.allclose(f, [[-1.0, 1.0, 1.0], [-2.0, -2.0, 1.0]])
    frame = RadarFrame(x, np.zeros((2, 3)))
    assert np.allclose(warp(frame, f).positions, t.apply(x))
    with pytest.raises(LengthMismatchError):
        warp(frame, np.zeros((3, 3)))


def test_spherical_roundtrip(rng):
    p = rng.normal(size=(100, 3)) * 20
    r, th, ph = cartesian_to_spherical(p)
    assert np.allclose(spherical_to_cartesian(r, th, ph), p, atol=1e-12)
    with pytest.raises(OriginPointError):
        cartesian_to_spherical(np.zeros(3))


def test_jacobian_matches_finite_differences(rng):
    r = rng.uniform(1, 80, 200)
    th = rng.uniform(-np.pi, np.pi, 200)
    ph = rng.uniform(-1.2, 1.2, 200)
    J = spherical_jacobian(r, th, ph)
    h = 1e-6
    for k, name in enumerate("r th ph".split()):
        args_p = [r.copy(), th.copy(), ph.copy()]
        args_m = [r.copy(), th.copy(), ph.copy()]
        args_p[k] += h
        args_m[k] -= h
        fd = (spherical_to_cartesian(*args_p) - spherical_to_cartesian(*args_m)) / (2 * h)
        assert np.abs(fd - J[..., :, k]).max() < 1e-6 * max(1.0, np.abs(J).max()), name


def test_point_resolution_on_x_axis():
    # on the x axis: dX/dr = 1, dY/dtheta = r, dZ/dphi = r
    res = SphericalResolution(0.2, 0.01, 0.02)
    d = point_resolution(np.array([10.0, 0.0, 0.0]), res)
    assert d == pytest.approx(np.sqrt(0.2 ** 2 + 0.1 ** 2 + 0.2 ** 2), rel=1e-12)


def test_point_resolution_linear_in_resolution(rng):
    p = rng.normal(size=(20, 3)) * 30
    res = SphericalResolution.from_degrees(0.2, 1.6, 1.0)
    assert np.allclose(point_resolution(p, res.scaled(10.0)), 10 * point_resolution(p, res))


def test_resolution_invalid():
    with pytest.raises(ValueError):
        SphericalResolution(0.0, 0.1, 0.1)


def test_pairwise_and_nearest():
    a = np.array([[0.0, 0, 0], [5.0, 0, 0]])
    b = np.array([[1.0, 0, 0], [4.0, 0, 0], [1.0, 0, 0]])
    d = pairwise_sq_dists(a, b)
    assert np.array_equal(d, [[1, 16, 1], [16, 1, 16]])
    idx, d2 = nearest_neighbors(a, b)
    assert idx.tolist() == [0, 1]  # tie between 0 and 2 goes to the lower index
    assert d2.tolist() == [1.0, 1.0]


def test_knn_excludes_self_and_orders():
    x = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0], [6.0, 0, 0]])
    idx, d2 = knn(x, x, 2, exclude_self=True)
    assert idx.tolist() == [[1, 2], [0, 2], [1, 0], [2, 1]]
    assert d2[0].tolist() == [1.0, 9.0]
    idx, _ = knn(x, x, 10, exclude_self=True)
    assert idx.shape == (4, 3)


def test_random_rotation_is_proper(rng):
    for _ in range(20):
        R = random_rotation(rng)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)
