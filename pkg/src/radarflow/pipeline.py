"""Coarse flow from the network followed by static flow refinement."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FramePair, RigidTransform
from .metrics import MetricConfig, aggregate, evaluate_pair
from .rofe import RofeModel
from .sfr import refine, static_mask
from . import tensor as T

PREDICTION_MAGIC = b"R4DP"
PREDICTION_VERSION = 1


@dataclass
class Prediction:
    flow: np.ndarray  # (N1, 3) final flow
    moving: np.ndarray  # bool (N1,), complement of the static mask
    ego: RigidTransform  # refined ego-motion (identity when refinement was skipped)
    coarse: np.ndarray
    flow_tensor: T.Tensor = None


def run(model: RofeModel, pair: FramePair, zeta: float, use_sfr: bool = True) -> Prediction:
    """Differentiable forward pass.

    With ``use_sfr=False`` the coarse flow is returned unchanged; the static
    mask is still computed so motion segmentation can be scored, and the
    ego-motion is the all-point rigid fit.
    """
    coarse = model(pair)
    mask, t_cr, e = static_mask(pair, coarse.data, zeta)
    if not use_sfr:
        return Prediction(coarse.data.copy(), ~mask.flags, t_cr, coarse.data.copy(), coarse)
    out = refine(pair, coarse, mask, t_cr, e)
    return Prediction(out.final_flow, ~mask.flags, out.ego_motion, coarse.data.copy(), out.final_tensor)


def predict(model: RofeModel, pair: FramePair, zeta: float, use_sfr: bool = True) -> Prediction:
    """Inference only; no graph is kept."""
    with T.no_grad():
        pred = run(model, pair, zeta, use_sfr)
    pred.flow_tensor = None
    return pred


def evaluate_model(model: RofeModel, data, zeta: float, use_sfr: bool = True,
                   cfg: MetricConfig = MetricConfig()):
    """Full-resolution evaluation over ``(pair, labels)`` records.

    Returns the pooled report and the per-pair results.
    """
    results = []
    for pair, labels in data:
        pred = predict(model, pair, zeta, use_sfr)
        results.append(evaluate_pair(pair, labels, pred.flow, cfg, pred.moving))
    return aggregate(results, cfg), results


def write_prediction(path, flow, static_flags, ego: RigidTransform) -> None:
    """Little-endian: magic, version u32, N u32, flow (N x 3 f64), static flags
    (N x u8), ego transform (12 f64, row-major R|t)."""
    flow = np.asarray(flow, dtype="<f8").reshape(-1, 3)
    flags = np.asarray(static_flags, dtype=bool).reshape(-1)
    if len(flags) != len(flow):
        raise ValueError("one static flag per flow row expected")
    Path(path).write_bytes(b"".join([
        PREDICTION_MAGIC, struct.pack("<II", PREDICTION_VERSION, len(flow)),
        np.ascontiguousarray(flow).tobytes(), flags.astype(np.uint8).tobytes(),
        np.asarray(ego.to_row_major(), dtype="<f8").tobytes()]))


def read_prediction(path):
    """Return ``(flow, static_flags, ego)`` from a prediction file."""
    buf = Path(path).read_bytes()
    if buf[:4] != PREDICTION_MAGIC:
        raise ValueError(f"{path}: not a prediction file")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != PREDICTION_VERSION:
        raise ValueError(f"{path}: unsupported prediction version {version}")
    off = 12
    flow = np.frombuffer(buf, "<f8", n * 3, off).reshape(n, 3).astype(np.float64)
    off += n * 24
    flags = np.frombuffer(buf, np.uint8, n, off).astype(bool)
    off += n
    ego = RigidTransform.from_row_major(np.frombuffer(buf, "<f8", 12, off).astype(np.float64))
    return flow, flags, ego
