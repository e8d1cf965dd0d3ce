"""Self-supervised losses on predicted scene flow.

All losses take the flow as a ``Tensor`` (or array) of shape (N1, 3) and
return a scalar ``Tensor`` so they can be differentiated.  Neighbor searches,
KDE densities and outlier gates are computed on detached values.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .core import FramePair, HyperParams, OriginPointError, TooFewPointsError, as_flow
from .geometry import knn, nearest_neighbors, pairwise_sq_dists

LOSS_NAMES = ("rd", "sc", "ss")
GAUSS_NORM = (2.0 * np.pi) ** -1.5


@dataclass(frozen=True)
class LossConfig:
    enabled: tuple = LOSS_NAMES
    hard_chamfer: bool = False  # plain Chamfer: no density gate, no tolerance
    uniform_smoothness: bool = False  # plain smoothness: equal neighbor weights
    reduction: str = "sum"  # "sum" or "mean"

    def __post_init__(self):
        object.__setattr__(self, "enabled", tuple(n for n in LOSS_NAMES if n in self.enabled))
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


@dataclass
class LossBreakdown:
    total: float
    rd: float
    sc: float
    ss: float
    discarded_src: int = 0
    discarded_dst: int = 0
    total_tensor: T.Tensor = field(default=None, repr=False)


def _flow_tensor(flow) -> T.Tensor:
    if isinstance(flow, T.Tensor):
        return flow
    return T.tensor(as_flow(flow))


def radial_displacement_loss(pair: FramePair, flow, reduction: str = "sum") -> T.Tensor:
    """Sum over source points of |flow · unit(x) - rrv * dt|."""
    x = pair.source.positions
    s = _flow_tensor(flow)
    if s.shape != x.shape:
        raise ValueError(f"flow shape {s.shape} does not match source {x.shape}")
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    if (norm == 0).any():
        raise OriginPointError("radial direction undefined at the sensor origin")
    radial = T.tsum(T.mul(s, T.tensor(x / norm)), axis=1)
    resid = T.tabs(T.sub(radial, T.tensor(pair.source.rrv * pair.dt)))
    loss = T.tsum(resid)
    return T.scale(loss, 1.0 / len(x)) if reduction == "mean" else loss


def density(points, reference) -> np.ndarray:
    """Gaussian KDE (unit variance, normalized) of each point against ``reference``."""
    points = np.asarray(points.positions if hasattr(points, "positions") else points, dtype=np.float64)
    reference = np.asarray(reference.positions if hasattr(reference, "positions") else reference, dtype=np.float64)
    if len(reference) == 0:
        raise ValueError("reference cloud is empty")
    d2 = pairwise_sq_dists(points.reshape(-1, 3), reference.reshape(-1, 3))
    return GAUSS_NORM * np.exp(-0.5 * d2).mean(axis=1)


def soft_chamfer_loss(pair: FramePair, flow, delta: float, epsilon: float, reduction: str = "sum"):
    """Bidirectional nearest-neighbor loss with density gating and a hinge.

    Returns ``(loss, discarded_src, discarded_dst)``.  Points whose density
    against the opposite cloud is not above ``delta`` are dropped, and squared
    matching distances below ``epsilon`` cost nothing.
    """
    s = _flow_tensor(flow)
    x = pair.source.positions
    q = pair.target.positions
    warped = T.add(T.tensor(x), s)
    wd = warped.data
    gate_src = density(wd, q) > delta
    gate_dst = density(q, wd) > delta

    nn_fwd, _ = nearest_neighbors(wd, q)
    d_fwd = T.squared_norm(T.sub(warped, T.tensor(q[nn_fwd])), axis=1)
    nn_bwd, _ = nearest_neighbors(q, wd)
    d_bwd = T.squared_norm(T.sub(T.tensor(q), T.gather(warped, nn_bwd)), axis=1)

    fwd = T.tsum(T.mul(T.relu(T.sub(d_fwd, epsilon)), T.tensor(gate_src.astype(float))))
    bwd = T.tsum(T.mul(T.relu(T.sub(d_bwd, epsilon)), T.tensor(gate_dst.astype(float))))
    if reduction == "mean":
        fwd, bwd = T.scale(fwd, 1.0 / len(x)), T.scale(bwd, 1.0 / len(q))
    return T.add(fwd, bwd), int((~gate_src).sum()), int((~gate_dst).sum())


def smoothness_weights(positions, alpha: float, n_neighbors: int, uniform: bool = False):
    """Neighbor indices (N, k) and per-neighborhood normalized RBF weights (N, k)."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) < 2:
        raise TooFewPointsError("smoothness needs at least 2 points")
    idx, d2 = knn(positions, positions, n_neighbors, exclude_self=True)
    if uniform:
        return idx, np.full(idx.shape, 1.0 / idx.shape[1])
    k = np.exp(-d2 / alpha)
    e = np.exp(k - k.max(axis=1, keepdims=True))
    return idx, e / e.sum(axis=1, keepdims=True)


def smoothness_loss(frame, flow, alpha: float, n_neighbors: int, uniform: bool = False,
                    reduction: str = "sum") -> T.Tensor:
    """Weighted squared flow differences between each point and its neighbors."""
    s = _flow_tensor(flow)
    idx, w = smoothness_weights(frame.positions, alpha, n_neighbors, uniform)
    k = idx.shape[1]
    diff = T.sub(T.gather(s, idx), T.gather(s, np.repeat(np.arange(len(idx))[:, None], k, axis=1)))
    loss = T.tsum(T.mul(T.squared_norm(diff, axis=2), T.tensor(w)))
    return T.scale(loss, 1.0 / len(idx)) if reduction == "mean" else loss


def total_loss(pair: FramePair, flow, hp: HyperParams, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    s = _flow_tensor(flow)
    zero = T.tensor(0.0)
    rd = sc = ss = zero
    n_src = n_dst = 0
    if "rd" in cfg.enabled:
        rd = radial_displacement_loss(pair, s, cfg.reduction)
    if "sc" in cfg.enabled:
        if cfg.hard_chamfer:
            sc, n_src, n_dst = soft_chamfer_loss(pair, s, -np.inf, 0.0, cfg.reduction)
        else:
            sc, n_src, n_dst = soft_chamfer_loss(pair, s, hp.delta, hp.epsilon, cfg.reduction)
    if "ss" in cfg.enabled:
        ss = smoothness_loss(pair.source, s, hp.alpha, hp.n_neighbors, cfg.uniform_smoothness, cfg.reduction)
    total = T.add(T.add(rd, sc), ss)
    return LossBreakdown(total.item(), rd.item(), sc.item(), ss.item(), n_src, n_dst, total)
