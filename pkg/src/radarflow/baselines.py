"""Non-learned references: point-to-point ICP and single-shot rigid flow."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DegenerateConfigurationError, FramePair, RigidTransform, TooFewPointsError
from .geometry import kabsch, nearest_neighbors, transform_to_flow

TRIM_FACTOR = 3.0  # correspondences farther than this times the median distance are dropped


@dataclass
class IcpResult:
    transform: RigidTransform
    flow: np.ndarray
    iterations: int
    objective: list  # mean squared NN distance after each accepted iterate, starting with identity


def icp_objective(src: np.ndarray, dst: np.ndarray) -> float:
    _, d2 = nearest_neighbors(src, dst)
    return float(np.mean(d2))


def icp(pair: FramePair, max_iters: int = 50, tol: float = 1e-6) -> IcpResult:
    """Rigid alignment of the source onto the target.

    Each iteration matches every warped source point to its nearest target
    point, drops matches beyond ``TRIM_FACTOR`` times the median distance and
    refits with Kabsch.  An iterate that would raise the mean squared NN
    distance is rejected and the loop stops, so the objective never increases.
    """
    x = pair.source.positions
    y = pair.target.positions
    if len(x) < 3 or len(y) < 3:
        raise TooFewPointsError("ICP needs at least 3 points per frame")
    current = RigidTransform.identity()
    warped = x.copy()
    history = [icp_objective(warped, y)]
    it = 0
    for it in range(1, max_iters + 1):
        nn, d2 = nearest_neighbors(warped, y)
        d = np.sqrt(d2)
        keep = d <= TRIM_FACTOR * np.median(d)
        if keep.sum() < 3:
            break
        try:
            step = kabsch(x[keep], y[nn[keep]])
        except DegenerateConfigurationError:
            break
        candidate = step.apply(x)
        value = icp_objective(candidate, y)
        if value > history[-1]:
            break
        shift = float(np.linalg.norm(candidate - warped, axis=1).mean())
        current, warped = step, candidate
        history.append(value)
        if shift < tol:
            break
    return IcpResult(current, transform_to_flow(current, x), it, history)


def rigid_only_flow(pair: FramePair) -> np.ndarray:
    """One Kabsch fit over nearest-neighbor matches, applied to every point."""
    return icp(pair, max_iters=1).flow
