"""Self-supervised training: sampling, augmentation, Adam, checkpoint selection."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .core import ConfigInvalidError, FrameLabels, FramePair, RadarFlowError, RadarFrame, RigidTransform
from .geometry import yaw_rotation
from .losses import LossConfig, total_loss
from .metrics import MetricConfig
from .pipeline import evaluate_model, run
from .rofe import RofeModel, save_checkpoint

log = logging.getLogger(__name__)


class DatasetEmptyError(RadarFlowError):
    pass


class DivergedLossError(RadarFlowError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    lr_decay: float = 0.9
    batch_size: int = 1
    sample_points: int = 256
    seed: int = 0
    augment: bool = True
    aug_yaw_deg: float = 10.0
    aug_translation: float = 0.0  # m per axis; see README on why this defaults to 0
    use_sfr: bool = True
    losses: tuple = ("rd", "sc", "ss")
    hard_chamfer: bool = False
    uniform_smoothness: bool = False
    loss_reduction: str = "sum"
    features: tuple = ("rrv", "rcs", "power")
    max_steps_per_epoch: Optional[int] = None  # None = one pass over the training split

    def __post_init__(self):
        object.__setattr__(self, "losses", tuple(self.losses))
        object.__setattr__(self, "features", tuple(self.features))
        problems = []
        if not self.lr > 0:
            problems.append("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            problems.append("lr_decay must be in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.sample_points < 3:
            problems.append("epochs, batch_size must be >= 1 and sample_points >= 3")
        if set(self.losses) - {"rd", "sc", "ss"}:
            problems.append(f"unknown loss names {sorted(set(self.losses) - {'rd', 'sc', 'ss'})}")
        if set(self.features) - {"rrv", "rcs", "power"}:
            problems.append("unknown feature names")
        if self.aug_yaw_deg < 0 or self.aug_translation < 0:
            problems.append("augmentation ranges must be non-negative")
        if self.loss_reduction not in ("sum", "mean"):
            problems.append("loss_reduction must be sum or mean")
        if problems:
            raise ConfigInvalidError("; ".join(problems))

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.losses, self.hard_chamfer, self.uniform_smoothness, self.loss_reduction)

    @property
    def feature_mask(self) -> tuple:
        return tuple(name in self.features for name in ("rrv", "rcs", "power"))

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 0-based ``epoch`` (= after ``epoch`` decays)."""
        return self.lr * self.lr_decay ** epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["losses"] = list(self.losses)
        d["features"] = list(self.features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalidError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def downsample(pair: FramePair, labels: FrameLabels, k: int, rng: np.random.Generator):
    """Uniform random subsets (without replacement) of both frames; frames with
    at most ``k`` points are kept whole."""
    def pick(n):
        return np.sort(rng.permutation(n)[:k]) if n > k else np.arange(n)
    i = pick(len(pair.source))
    j = pick(len(pair.target))
    return FramePair(pair.source.subset(i), pair.target.subset(j), pair.dt), labels.subset(i)


def augment(pair: FramePair, labels: FrameLabels, rng: np.random.Generator,
            yaw_deg: float = 10.0, translation: float = 0.0):
    """Apply one rigid change of coordinates to both frames and the labels.

    Radial velocities are left as measured.  With ``translation = 0`` the
    radial directions are preserved and so is the Doppler relation between
    flow and radial velocity; a nonzero translation breaks it slightly.
    """
    yaw = np.radians(rng.uniform(-yaw_deg, yaw_deg))
    shift = rng.uniform(-translation, translation, 3) if translation > 0 else np.zeros(3)
    A = RigidTransform(yaw_rotation(yaw), shift)

    def move(frame: RadarFrame):
        return RadarFrame(A.apply(frame.positions), frame.features, frame.timestamp)

    ego = A.compose(labels.gt_ego).compose(A.inverse())
    flow = labels.gt_flow @ A.rotation.T
    return (FramePair(move(pair.source), move(pair.target), pair.dt),
            FrameLabels(flow, labels.gt_moving, ego, labels.valid))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    rd: float
    sc: float
    ss: float
    val: dict = field(default_factory=dict)

    def log_line(self) -> str:
        def fmt(v):
            return "undefined" if v is None else format(v, ".6g")
        parts = [f"epoch={self.epoch}", f"lr={self.lr:.6g}", f"train_loss={self.loss:.6g}",
                 f"rd={self.rd:.6g}", f"sc={self.sc:.6g}", f"ss={self.ss:.6g}"]
        parts += [f"val_{k}={fmt(self.val.get(k))}" for k in ("avg_epe", "avg_rne", "sas", "ras")]
        return " ".join(parts)


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_rne: float
    best_state: dict


def _step_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | (epoch << 32) | step))


def train_step(model: RofeModel, opt: Adam, batch, cfg: TrainConfig, hp) -> dict:
    """Forward/backward on each pair of ``batch`` and one Adam update with averaged gradients."""
    params = model.parameters()
    acc = [np.zeros_like(p.data) for p in params]
    sums = dict(total=0.0, rd=0.0, sc=0.0, ss=0.0)
    for pair, where in batch:
        model.zero_grad()
        pred = run(model, pair, hp.zeta, cfg.use_sfr)
        parts = total_loss(pair, pred.flow_tensor, hp, cfg.loss_config)
        if not math.isfinite(parts.total):
            raise DivergedLossError(
                f"non-finite loss at {where}: rd={parts.rd} sc={parts.sc} ss={parts.ss}; "
                f"max |coarse flow| = {np.abs(pred.coarse).max():.3g}")
        T.backward(parts.total_tensor)
        for a, p in zip(acc, params):
            if p.grad is not None:
                a += p.grad
        for k in ("rd", "sc", "ss"):
            sums[k] += getattr(parts, k)
        sums["total"] += parts.total
    n = len(batch)
    grads = [a / n for a in acc]
    if not all(np.isfinite(g).all() for g in grads):
        raise DivergedLossError(f"non-finite gradient at {batch[0][1]}")
    opt.step(grads)
    return {k: v / n for k, v in sums.items()}


def train(model: RofeModel, train_data, val_data, cfg: TrainConfig, out_dir=None,
          metric_cfg: MetricConfig = MetricConfig()) -> TrainResult:
    """Train ``model`` in place.

    Writes ``metrics.log``, ``last.ckpt`` and ``best.ckpt`` (lowest validation
    Avg RNE) to ``out_dir`` when given.  The model ends holding the last
    epoch's weights; the best weights are returned in the result.
    """
    if not train_data:
        raise DatasetEmptyError("training split is empty")
    if not val_data:
        raise DatasetEmptyError("validation split is empty")
    hp = model.hp
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.log").write_text("")
        (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    opt = Adam(model.parameters(), cfg.lr)
    history = []
    best = (math.inf, -1, None)
    n_train = len(train_data)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = _step_rng(cfg.seed, epoch, 0xFFFFFFFF).permutation(n_train)
        n_steps = math.ceil(n_train / cfg.batch_size)
        if cfg.max_steps_per_epoch is not None:
            n_steps = min(n_steps, cfg.max_steps_per_epoch)
        totals = dict(total=0.0, rd=0.0, sc=0.0, ss=0.0)
        for step in range(n_steps):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            rng = _step_rng(cfg.seed, epoch, step)
            batch = []
            for i in idx:
                pair, labels = downsample(*train_data[i], cfg.sample_points, rng)
                if cfg.augment:
                    pair, labels = augment(pair, labels, rng, cfg.aug_yaw_deg, cfg.aug_translation)
                batch.append((pair, f"epoch {epoch + 1} step {step} pair {i}"))
            parts = train_step(model, opt, batch, cfg, hp)
            for k in totals:
                totals[k] += parts[k] / n_steps
        report, _ = evaluate_model(model, val_data, hp.zeta, cfg.use_sfr, metric_cfg)
        rec = EpochRecord(epoch + 1, opt.lr, totals["total"], totals["rd"], totals["sc"], totals["ss"],
                          report.as_dict())
        history.append(rec)
        log.info(rec.log_line())
        val_rne = report.avg_rne if report.avg_rne is not None else math.inf
        extra = {"epoch": epoch + 1, "val_avg_rne": report.avg_rne, "train_config": cfg.to_dict()}
        if val_rne < best[0]:
            best = (val_rne, epoch + 1, model.state_dict())
            if out is not None:
                save_checkpoint(model, out / "best.ckpt", extra)
        if out is not None:
            with open(out / "metrics.log", "a") as fh:
                fh.write(rec.log_line() + "\n")
            save_checkpoint(model, out / "last.ckpt", extra)
    return TrainResult(history, best[1], best[0], best[2])
