"""Scene-flow evaluation: EPE, resolution-normalized EPE, accuracy scores,
static/moving split and motion segmentation scores."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .core import LengthMismatchError, OriginPointError
from .geometry import SphericalResolution, point_resolution

RADAR_RESOLUTION = SphericalResolution.from_degrees(0.2, 1.6, 1.0)
LIDAR_RESOLUTION = SphericalResolution.from_degrees(0.02, 0.08, 0.4)
REPORT_KEYS = ("avg_epe", "avg_rne", "stat_rne", "mov_rne", "fifty_fifty_rne", "sas", "ras",
               "seg_accuracy", "seg_miou", "seg_sensitivity")
UNDEFINED = "undefined"


@dataclass(frozen=True)
class MetricConfig:
    radar_res: SphericalResolution = RADAR_RESOLUTION
    lidar_res: SphericalResolution = LIDAR_RESOLUTION
    sas_abs: float = 0.1
    sas_rel: float = 0.10
    ras_abs: float = 0.2
    ras_rel: float = 0.20

    def __post_init__(self):
        if min(self.sas_abs, self.sas_rel, self.ras_abs, self.ras_rel) <= 0:
            raise ValueError("accuracy thresholds must be positive")


@dataclass
class EvalReport:
    """Aggregate scores; ``None`` marks a value that is undefined for the data."""
    avg_epe: Optional[float] = None
    avg_rne: Optional[float] = None
    stat_rne: Optional[float] = None
    mov_rne: Optional[float] = None
    fifty_fifty_rne: Optional[float] = None
    sas: Optional[float] = None
    ras: Optional[float] = None
    seg_accuracy: Optional[float] = None
    seg_miou: Optional[float] = None
    seg_sensitivity: Optional[float] = None

    def to_text(self) -> str:
        lines = []
        for key in REPORT_KEYS:
            v = getattr(self, key)
            lines.append(f"{key} = {UNDEFINED if v is None else format(v, '.6g')}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition(" = ")
            if key not in REPORT_KEYS:
                raise ValueError(f"unknown report key {key!r}")
            values[key] = None if value == UNDEFINED else float(value)
        return cls(**values)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def epe(flow, gt) -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if flow.shape != gt.shape:
        raise LengthMismatchError(f"flow {flow.shape} vs gt {gt.shape}")
    return np.linalg.norm(flow - gt, axis=-1)


def rne(positions, errors, cfg: MetricConfig = MetricConfig()) -> np.ndarray:
    """EPE divided by the radar/LiDAR resolution ratio at each point."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    errors = np.asarray(errors, dtype=np.float64)
    if len(errors) != len(positions):
        raise LengthMismatchError("one error per point expected")
    if (np.linalg.norm(positions, axis=1) == 0).any():
        raise OriginPointError("resolution undefined at the sensor origin")
    ratio = np.atleast_1d(point_resolution(positions, cfg.radar_res)) / np.atleast_1d(
        point_resolution(positions, cfg.lidar_res))
    return errors / ratio


def accuracy_scores(rne_values, gt_norm, cfg: MetricConfig = MetricConfig()):
    """(SAS, RAS): shares of points within the absolute or relative thresholds."""
    rne_values = np.asarray(rne_values, dtype=np.float64)
    gt_norm = np.asarray(gt_norm, dtype=np.float64)
    if rne_values.shape != gt_norm.shape:
        raise LengthMismatchError("rne and gt norms differ in length")
    if rne_values.size == 0:
        return None, None
    pos = gt_norm > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(pos, rne_values / np.where(pos, gt_norm, 1.0), np.inf)
    sas = (rne_values <= cfg.sas_abs) | (rel <= cfg.sas_rel)
    ras = (rne_values <= cfg.ras_abs) | (rel <= cfg.ras_rel)
    return float(sas.mean()), float(ras.mean())


def segmentation_scores(pred_moving, gt_moving):
    """(accuracy, mean IoU over {moving, static}, recall of moving).

    A class absent from both prediction and truth is left out of the IoU mean;
    sensitivity is undefined (None) without moving ground truth.
    """
    pred = np.asarray(pred_moving, dtype=bool)
    gt = np.asarray(gt_moving, dtype=bool)
    if pred.shape != gt.shape:
        raise LengthMismatchError("prediction and truth differ in length")
    if pred.size == 0:
        return None, None, None
    tp = int((pred & gt).sum())
    tn = int((~pred & ~gt).sum())
    fp = int((pred & ~gt).sum())
    fn = int((~pred & gt).sum())
    ious = []
    for inter, union in ((tp, tp + fp + fn), (tn, tn + fp + fn)):
        if union:
            ious.append(inter / union)
    sensitivity = tp / (tp + fn) if tp + fn else None
    return (tp + tn) / pred.size, float(np.mean(ious)), sensitivity


def _mean(values) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def class_split_report(positions, flow, gt_flow, gt_moving, cfg: MetricConfig = MetricConfig(),
                       pred_moving=None) -> EvalReport:
    """Full report for one set of points (ghost points already removed)."""
    e = epe(flow, gt_flow)
    r = rne(positions, e, cfg)
    gt_moving = np.asarray(gt_moving, dtype=bool)
    if len(gt_moving) != len(e):
        raise LengthMismatchError("labels do not match the flow")
    sas, ras = accuracy_scores(r, np.linalg.norm(np.asarray(gt_flow), axis=-1), cfg)
    stat = _mean(r[~gt_moving])
    mov = _mean(r[gt_moving])
    ff = (stat + mov) / 2 if stat is not None and mov is not None else None
    seg = (None, None, None) if pred_moving is None else segmentation_scores(pred_moving, gt_moving)
    return EvalReport(_mean(e), _mean(r), stat, mov, ff, sas, ras, *seg)


@dataclass
class PairResult:
    """Per-point values of one evaluated pair, restricted to valid points."""
    epe: np.ndarray
    rne: np.ndarray
    gt_norm: np.ndarray
    gt_moving: np.ndarray
    pred_moving: Optional[np.ndarray] = None


def evaluate_pair(pair, labels, flow, cfg: MetricConfig = MetricConfig(), pred_moving=None) -> PairResult:
    v = labels.valid
    x = pair.source.positions[v]
    e = epe(np.asarray(flow)[v], labels.gt_flow[v])
    return PairResult(e, rne(x, e, cfg), np.linalg.norm(labels.gt_flow[v], axis=1), labels.gt_moving[v],
                      None if pred_moving is None else np.asarray(pred_moving, bool)[v])


def aggregate(results, cfg: MetricConfig = MetricConfig()) -> EvalReport:
    """Pool per-point values over pairs into one report."""
    if not results:
        return EvalReport()
    e = np.concatenate([p.epe for p in results])
    r = np.concatenate([p.rne for p in results])
    n = np.concatenate([p.gt_norm for p in results])
    gm = np.concatenate([p.gt_moving for p in results])
    sas, ras = accuracy_scores(r, n, cfg)
    stat = _mean(r[~gm])
    mov = _mean(r[gm])
    ff = (stat + mov) / 2 if stat is not None and mov is not None else None
    seg = (None, None, None)
    if all(p.pred_moving is not None for p in results):
        seg = segmentation_scores(np.concatenate([p.pred_moving for p in results]), gm)
    return EvalReport(_mean(e), _mean(r), stat, mov, ff, sas, ras, *seg)


def mean_epe_by_class(results):
    """(static, moving) mean EPE over pooled points; None for an empty class."""
    e = np.concatenate([p.epe for p in results])
    gm = np.concatenate([p.gt_moving for p in results])
    return _mean(e[~gm]), _mean(e[gm])


def is_finite_report(report: EvalReport) -> bool:
    return all(v is None or math.isfinite(v) for v in report.as_dict().values())
