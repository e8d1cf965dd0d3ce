"""Shared domain types: radar frames, flows, rigid transforms and hyperparameters."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

FEATURE_NAMES = ("rrv", "rcs", "power")
N_CHANNELS = 6  # x, y, z, rrv, rcs, power


class RadarFlowError(Exception):
    """Base class for all errors raised by this package."""


class NonFiniteError(RadarFlowError):
    pass


class EmptyFrameError(RadarFlowError):
    pass


class OriginPointError(RadarFlowError):
    pass


class LengthMismatchError(RadarFlowError):
    pass


class TooFewPointsError(RadarFlowError):
    pass


class DegenerateConfigurationError(RadarFlowError):
    pass


class ConfigInvalidError(RadarFlowError):
    pass


class RadarPoint(NamedTuple):
    position: np.ndarray  # (3,) meters
    rrv: float  # m/s, positive = receding
    rcs: float  # dBsm
    power: float  # dBm


@dataclass(frozen=True)
class RadarFrame:
    """One radar scan.

    ``positions`` is (N, 3) in meters in the sensor frame and ``features`` is
    (N, 3) holding rrv, rcs and power per point.
    """

    positions: np.ndarray
    features: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        feats = np.ascontiguousarray(self.features, dtype=np.float64).reshape(-1, 3)
        if len(pos) != len(feats):
            raise LengthMismatchError(f"{len(pos)} positions but {len(feats)} feature rows")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feats)

    @classmethod
    def from_points(cls, points, timestamp: float = 0.0) -> "RadarFrame":
        points = list(points)
        pos = np.array([p.position for p in points], dtype=np.float64).reshape(-1, 3)
        feats = np.array([[p.rrv, p.rcs, p.power] for p in points], dtype=np.float64).reshape(-1, 3)
        return cls(pos, feats, timestamp)

    @classmethod
    def from_array(cls, arr, timestamp: float = 0.0) -> "RadarFrame":
        """Build from an (N, 6) array of x, y, z, rrv, rcs, power."""
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, N_CHANNELS)
        return cls(arr[:, :3], arr[:, 3:], timestamp)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> RadarPoint:
        f = self.features[i]
        return RadarPoint(self.positions[i].copy(), float(f[0]), float(f[1]), float(f[2]))

    @property
    def rrv(self) -> np.ndarray:
        return self.features[:, 0]

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.positions, self.features], axis=1)

    def subset(self, idx) -> "RadarFrame":
        idx = np.asarray(idx)
        return RadarFrame(self.positions[idx], self.features[idx], self.timestamp)


@dataclass(frozen=True)
class FramePair:
    source: RadarFrame
    target: RadarFrame
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigInvalidError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        ortho = np.abs(R.T @ R - np.eye(3)).max()
        return bool(ortho < tol and abs(np.linalg.det(R) - 1.0) < tol)

    def to_row_major(self) -> np.ndarray:
        """12 values: the 3x4 matrix [R | t] row by row."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1).reshape(12)

    @classmethod
    def from_row_major(cls, values) -> "RigidTransform":
        m = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])


@dataclass(frozen=True)
class StaticMask:
    flags: np.ndarray  # bool (N,), True = static

    def __post_init__(self):
        object.__setattr__(self, "flags", np.asarray(self.flags, dtype=bool).reshape(-1))

    def __len__(self) -> int:
        return len(self.flags)


@dataclass(frozen=True)
class FrameLabels:
    gt_flow: np.ndarray  # (N, 3)
    gt_moving: np.ndarray  # bool (N,)
    gt_ego: RigidTransform
    valid: Optional[np.ndarray] = None  # bool (N,), False for ghost points

    def __post_init__(self):
        flow = np.asarray(self.gt_flow, dtype=np.float64).reshape(-1, 3)
        moving = np.asarray(self.gt_moving, dtype=bool).reshape(-1)
        valid = np.ones(len(flow), bool) if self.valid is None else np.asarray(self.valid, bool).reshape(-1)
        if not (len(flow) == len(moving) == len(valid)):
            raise LengthMismatchError("label arrays differ in length")
        object.__setattr__(self, "gt_flow", flow)
        object.__setattr__(self, "gt_moving", moving)
        object.__setattr__(self, "valid", valid)

    def subset(self, idx) -> "FrameLabels":
        idx = np.asarray(idx)
        return FrameLabels(self.gt_flow[idx], self.gt_moving[idx], self.gt_ego, self.valid[idx])


@dataclass(frozen=True)
class HyperParams:
    n_scales: int = 4
    c_local: int = 64
    c_cor: int = 512
    radii: tuple = (2.0, 4.0, 8.0, 16.0)
    zeta: float = 0.15
    delta: float = 0.005
    epsilon: float = 0.1
    alpha: float = 0.5
    n_neighbors: int = 8

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if len(self.radii) != self.n_scales:
            raise ConfigInvalidError("radii must have n_scales entries")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise ConfigInvalidError("radii must be strictly increasing")
        for name in ("zeta", "delta", "epsilon", "alpha"):
            if not getattr(self, name) > 0:
                raise ConfigInvalidError(f"{name} must be positive")
        if self.radii[0] <= 0 or self.n_neighbors < 1 or self.c_local < 1 or self.c_cor < 1:
            raise ConfigInvalidError("counts and radii must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radii"] = list(self.radii)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalidError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**d)

    def dumps(self) -> str:
        # repr-exact floats keep the round trip bit-exact
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "HyperParams":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "HyperParams":
        return cls.loads(Path(path).read_text())


def default_hyperparams() -> HyperParams:
    return HyperParams()


def validate_frame(frame: RadarFrame) -> RadarFrame:
    """Return ``frame`` unchanged if it is usable, otherwise raise."""
    if len(frame) == 0:
        raise EmptyFrameError("frame has no points")
    if not (np.isfinite(frame.positions).all() and np.isfinite(frame.features).all()):
        raise NonFiniteError("frame contains NaN or Inf values")
    if (np.linalg.norm(frame.positions, axis=1) == 0).any():
        raise OriginPointError("frame contains a point at the sensor origin")
    return frame


def as_flow(flow, n: Optional[int] = None) -> np.ndarray:
    """Coerce a flow-like value to an (N, 3) float array, checking length."""
    arr = np.asarray(flow, dtype=np.float64).reshape(-1, 3)
    if n is not None and len(arr) != n:
        raise LengthMismatchError(f"flow has {len(arr)} rows, expected {n}")
    return arr
