"""Static flow refinement.

A static mask is derived by comparing the radial component of a coarse rigid
fit with the Doppler measurement of every point.  Static points then get
their flow replaced by the rigid flow of a second Kabsch fit over static
correspondences only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .core import DegenerateConfigurationError, FramePair, LengthMismatchError, RigidTransform, StaticMask, TooFewPointsError, as_flow
from .geometry import kabsch, transform_to_flow

log = logging.getLogger(__name__)

ETA_V = 1e-3  # m; below this |rrv * dt| the relative residual is undefined
ETA_ABS = 0.05  # m; absolute residual tolerance used in that case


@dataclass
class SfrOutput:
    final_flow: np.ndarray
    static_mask: StaticMask
    ego_motion: RigidTransform
    coarse_ego: RigidTransform
    residuals: np.ndarray  # e_i (relative, or absolute where rrv*dt ~ 0)
    final_tensor: T.Tensor = None


def radial_residuals(pair: FramePair, rigid_flow) -> tuple[np.ndarray, np.ndarray]:
    """Radial shift residual ``r_i`` and the classification score ``e_i``."""
    x = pair.source.positions
    radial = np.einsum("ij,ij->i", rigid_flow, x) / np.linalg.norm(x, axis=1)
    expected = pair.source.rrv * pair.dt
    r = radial - expected
    small = np.abs(expected) < ETA_V
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.where(small, np.abs(r), np.abs(r / np.where(small, 1.0, expected)))
    return r, e


def classify(e: np.ndarray, expected: np.ndarray, zeta: float) -> np.ndarray:
    small = np.abs(expected) < ETA_V
    return np.where(small, e <= ETA_ABS, e <= zeta)


def static_mask(pair: FramePair, coarse, zeta: float):
    """Static mask, coarse rigid transform and per-point scores from a coarse flow.

    All correspondences (x_i, x_i + s_c,i) are fed to Kabsch to get the
    coarse rigid transform; a point is static when its relative radial
    residual is at most ``zeta``.  Points with ``|rrv * dt| < ETA_V`` are
    judged on the absolute residual against ``ETA_ABS`` instead.
    """
    x = pair.source.positions
    if len(x) < 3:
        raise TooFewPointsError("static mask needs at least 3 source points")
    coarse = as_flow(coarse.data if isinstance(coarse, T.Tensor) else coarse, len(x))
    t_cr = kabsch(x, x + coarse)
    _, e = radial_residuals(pair, transform_to_flow(t_cr, x))
    flags = classify(e, pair.source.rrv * pair.dt, zeta)
    return StaticMask(flags), t_cr, e


def kabsch_tensor(src: np.ndarray, dst: T.Tensor):
    """Differentiable Kabsch: rotation (3, 3) and translation (3,) tensors."""
    n = len(src)
    src_c = src - src.mean(axis=0)
    dst_mean = T.scale(T.tsum(dst, axis=0), 1.0 / n)
    dst_c = T.sub(dst, T.gather(T.reshape(dst_mean, (1, 3)), np.zeros(n, dtype=int)))
    H = T.matmul(T.tensor(src_c.T), dst_c)  # sum_i p_i q_i^T
    R = T.procrustes_rotation(T.transpose(H))
    t = T.sub(dst_mean, T.reshape(T.matmul(R, T.tensor(src.mean(axis=0)[:, None])), (3,)))
    return R, t


def refine(pair: FramePair, coarse, mask: StaticMask, _t_cr=None, _e=None) -> SfrOutput:
    """Replace the flow of static points by the rigid flow of a static-only Kabsch fit.

    ``coarse`` may be a ``Tensor``; the returned ``final_tensor`` then carries
    gradients through both the coarse rows and the Kabsch fit.  With fewer
    than 3 static points the ego-motion falls back to identity and the final
    flow equals the coarse flow.
    """
    x = pair.source.positions
    s_c = coarse if isinstance(coarse, T.Tensor) else T.tensor(as_flow(coarse, len(x)))
    if s_c.shape != x.shape or len(mask) != len(x):
        raise LengthMismatchError("coarse flow / mask do not match the source frame")
    flags = mask.flags
    static_idx = np.flatnonzero(flags)
    degenerate = False
    if len(static_idx) >= 3:
        try:
            kabsch(x[static_idx], x[static_idx] + s_c.data[static_idx])
        except DegenerateConfigurationError:
            degenerate = True
    if len(static_idx) < 3 or degenerate:
        log.warning("%d static points (degenerate=%s); skipping rigid refinement", len(static_idx), degenerate)
        final = s_c
        ego = RigidTransform.identity()
    else:
        dst = T.add(T.tensor(x[static_idx]), T.gather(s_c, static_idx))
        R, t = kabsch_tensor(x[static_idx], dst)
        n = len(x)
        moved = T.linear(T.tensor(x), T.transpose(R))
        rigid = T.sub(T.add(moved, T.gather(T.reshape(t, (1, 3)), np.zeros(n, dtype=int))), T.tensor(x))
        m = flags.astype(float)[:, None].repeat(3, axis=1)
        final = T.add(T.mul(rigid, T.tensor(m)), T.mul(s_c, T.tensor(1.0 - m)))
        ego = RigidTransform(R.data, t.data)
    t_cr = _t_cr if _t_cr is not None else RigidTransform.identity()
    e = _e if _e is not None else np.zeros(len(x))
    return SfrOutput(final.data.copy(), mask, ego, t_cr, e, final)


def static_flow_refinement(pair: FramePair, coarse, zeta: float) -> SfrOutput:
    """Static mask generation followed by refinement, as one step."""
    data = coarse.data if isinstance(coarse, T.Tensor) else coarse
    mask, t_cr, e = static_mask(pair, data, zeta)
    return refine(pair, coarse, mask, t_cr, e)


def motion_segmentation(mask: StaticMask):
    """Indices of (moving, static) points."""
    flags = mask.flags
    return np.flatnonzero(~flags), np.flatnonzero(flags)
