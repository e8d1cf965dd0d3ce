"""Non-learned geometric kernels: Kabsch fitting, flow/transform conversion,
spherical coordinates and per-point sensor resolution.

Axis convention: azimuth ``theta = atan2(y, x)``, elevation ``phi = asin(z / r)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DegenerateConfigurationError,
    LengthMismatchError,
    OriginPointError,
    RadarFrame,
    RigidTransform,
    TooFewPointsError,
    as_flow,
)


@dataclass(frozen=True)
class SphericalResolution:
    d_range: float  # m
    d_azimuth: float  # rad
    d_elevation: float  # rad

    def __post_init__(self):
        if min(self.d_range, self.d_azimuth, self.d_elevation) <= 0:
            raise ValueError("resolutions must be positive")

    @classmethod
    def from_degrees(cls, d_range, d_azimuth_deg, d_elevation_deg):
        return cls(float(d_range), np.deg2rad(d_azimuth_deg), np.deg2rad(d_elevation_deg))

    def scaled(self, factor: float) -> "SphericalResolution":
        return SphericalResolution(self.d_range * factor, self.d_azimuth * factor, self.d_elevation * factor)


def kabsch(src, dst) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto ``dst``.

    Both inputs are (N, 3) with row i of ``src`` paired with row i of ``dst``.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise LengthMismatchError(f"{len(src)} source vs {len(dst)} target points")
    if len(src) < 3:
        raise TooFewPointsError(f"Kabsch needs at least 3 pairs, got {len(src)}")
    src_c = src.mean(axis=0)
    dst_c = dst.mean(axis=0)
    H = (src - src_c).T @ (dst - dst_c)
    U, S, Vt = np.linalg.svd(H)
    scale = max(S[0], 1e-300)
    if S[1] <= 1e-12 * scale or S[0] == 0.0:
        raise DegenerateConfigurationError("cross-covariance has rank < 2 (collinear or coincident points)")
    V = Vt.T
    if np.linalg.det(V @ U.T) < 0:
        V[:, -1] *= -1
    R = V @ U.T
    t = dst_c - R @ src_c
    return RigidTransform(R, t)


def transform_to_flow(t: RigidTransform, frame) -> np.ndarray:
    """Flow induced on every point by the rigid transform: ``R x + t - x``."""
    pos = frame.positions if isinstance(frame, RadarFrame) else np.asarray(frame, dtype=np.float64).reshape(-1, 3)
    return pos @ t.rotation.T + t.translation - pos


def warp(frame: RadarFrame, flow) -> RadarFrame:
    flow = np.asarray(flow, dtype=np.float64).reshape(-1, 3)
    if len(flow) != len(frame):
        raise LengthMismatchError(f"flow has {len(flow)} rows, frame has {len(frame)} points")
    return RadarFrame(frame.positions + flow, frame.features.copy(), frame.timestamp)


def cartesian_to_spherical(p):
    """Map (..., 3) points to (r, theta, phi) arrays."""
    p = np.asarray(p, dtype=np.float64)
    r = np.linalg.norm(p, axis=-1)
    if np.any(r == 0):
        raise OriginPointError("spherical coordinates undefined at the origin")
    theta = np.arctan2(p[..., 1], p[..., 0])
    phi = np.arcsin(np.clip(p[..., 2] / r, -1.0, 1.0))
    return r, theta, phi


def spherical_to_cartesian(r, theta, phi) -> np.ndarray:
    r, theta, phi = np.broadcast_arrays(*map(np.asarray, (r, theta, phi)))
    cphi = np.cos(phi)
    return np.stack([r * cphi * np.cos(theta), r * cphi * np.sin(theta), r * np.sin(phi)], axis=-1)


def spherical_jacobian(r, theta, phi) -> np.ndarray:
    """Partial derivatives of (X, Y, Z) w.r.t. (r, theta, phi).

    Returns (..., 3, 3) with rows indexed by Cartesian axis and columns by
    spherical coordinate.
    """
    r, theta, phi = np.broadcast_arrays(*map(np.asarray, (r, theta, phi)))
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    J = np.empty(r.shape + (3, 3))
    J[..., 0, 0] = cp * ct
    J[..., 0, 1] = -r * cp * st
    J[..., 0, 2] = -r * sp * ct
    J[..., 1, 0] = cp * st
    J[..., 1, 1] = r * cp * ct
    J[..., 1, 2] = -r * sp * st
    J[..., 2, 0] = sp
    J[..., 2, 1] = 0.0
    J[..., 2, 2] = r * cp
    return J


def point_resolution(p, res: SphericalResolution):
    """Approximate Cartesian resolution of a point (or (N, 3) points).

    Each Cartesian axis accumulates ``|dc/dh| * Δh`` over the three spherical
    coordinates; the per-point resolution is the norm of the three sums.
    """
    r, theta, phi = cartesian_to_spherical(p)
    J = spherical_jacobian(r, theta, phi)
    dh = np.array([res.d_range, res.d_azimuth, res.d_elevation])
    per_axis = np.abs(J) @ dh
    out = np.sqrt((per_axis ** 2).sum(axis=-1))
    return float(out) if out.ndim == 0 else out


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix from a unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def yaw_rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def pairwise_sq_dists(a, b) -> np.ndarray:
    """Exact (N, M) squared distances, computed by differences for stability."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def nearest_neighbors(query, ref):
    """Index and squared distance of the nearest ``ref`` point for each query.

    Ties resolve to the lowest reference index.
    """
    d2 = pairwise_sq_dists(query, ref)
    idx = np.argmin(d2, axis=1)
    return idx, d2[np.arange(len(idx)), idx]


def knn(query, ref, k: int, exclude_self: bool = False):
    """k nearest reference indices per query, ordered by distance then index."""
    d2 = pairwise_sq_dists(query, ref)
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    k = min(k, d2.shape[1] - (1 if exclude_self else 0))
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d2, order, axis=1)
