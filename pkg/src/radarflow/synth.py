"""Deterministic synthetic 4-D radar scenes with exact ground truth.

Randomness comes from numpy's Philox4x64-10 counter-based generator keyed by
``seed * 2**64 + pair_index``, so every pair has its own reproducible stream
regardless of generation order.

Scene model
-----------
The world frame is the source sensor frame.  Static structures (road rails,
walls, poles) and rigid movers (car-sized boxes driving along the road axis)
are sampled as point sets.  The sensor then moves by an ego transform ``E``
over ``dt``; target points are re-sampled independently from the moved
structures and expressed in the target sensor frame, so the two clouds share
no exact correspondences.

Ground-truth flow of a source point ``x`` is ``E^-1 (x + d) - x`` where ``d``
is the world displacement of its object (zero for static points); the
recorded ego transform is ``E^-1``.  Radial velocities are synthesized from
the flow so that ``rrv * dt = flow . x / |x|`` holds exactly before noise.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import ConfigInvalidError, FrameLabels, FramePair, RadarFrame, RigidTransform
from .geometry import spherical_to_cartesian, yaw_rotation

RECORD_MAGIC = b"R4DF"
RECORD_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    n_static: int = 195
    n_movers: int = 2
    points_per_mover: int = 5
    ego_speed: tuple = (8.0, 16.0)  # m/s, uniform range
    ego_yaw_rate: tuple = (-0.15, 0.15)  # rad/s
    mover_speed: tuple = (6.0, 14.0)  # m/s, relative to ground
    dt: float = 0.1
    position_noise: float = 0.03  # m, isotropic sigma
    rrv_noise: float = 0.05  # m/s sigma
    outlier_fraction: float = 0.2  # share of ghost points in each frame
    fov: tuple = (60.0, 10.0)  # azimuth / elevation half angles, degrees
    max_range: float = 75.0
    min_range: float = 2.0
    ego_acceleration: float = 0.0  # m/s^2; breaks the constant-velocity assumption when nonzero
    n_reflectors: int = 4  # compact strong scatterers (parked cars, signs, corners)
    reflector_share: float = 0.7  # fraction of static points returned by them
    reflector_sigma: float = 0.3  # m, spread of each scatterer

    def __post_init__(self):
        object.__setattr__(self, "ego_speed", tuple(float(v) for v in self.ego_speed))
        object.__setattr__(self, "ego_yaw_rate", tuple(float(v) for v in self.ego_yaw_rate))
        object.__setattr__(self, "mover_speed", tuple(float(v) for v in self.mover_speed))
        object.__setattr__(self, "fov", tuple(float(v) for v in self.fov))
        problems = []
        if not self.dt > 0:
            problems.append("dt must be positive")
        if not 0.0 <= self.outlier_fraction <= 0.5:
            problems.append("outlier_fraction must be in [0, 0.5]")
        if not 0.0 <= self.reflector_share <= 1.0:
            problems.append("reflector_share must be in [0, 1]")
        if self.n_reflectors < 0 or self.reflector_sigma <= 0:
            problems.append("n_reflectors must be non-negative and reflector_sigma positive")
        if self.n_static < 3:
            problems.append("n_static must be at least 3")
        if self.n_movers < 0 or self.points_per_mover < 0:
            problems.append("mover counts must be non-negative")
        if self.position_noise < 0 or self.rrv_noise < 0:
            problems.append("noise levels must be non-negative")
        if not 0 < self.min_range < self.max_range:
            problems.append("need 0 < min_range < max_range")
        for name in ("ego_speed", "ego_yaw_rate", "mover_speed"):
            lo, hi = getattr(self, name)
            if lo > hi:
                problems.append(f"{name} range is reversed")
        if not (0 < self.fov[0] < 90 and 0 < self.fov[1] < 90):
            problems.append("fov half angles must be in (0, 90) degrees")
        if problems:
            raise ConfigInvalidError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)

    def noiseless(self) -> "SceneConfig":
        return SceneConfig(**{**self.to_dict(), "position_noise": 0.0, "rrv_noise": 0.0,
                              "outlier_fraction": 0.0})


def pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(index)))


# --- scene structures ---------------------------------------------------------

class _Structure:
    """A sampleable point set with radar appearance and world displacement."""

    def __init__(self, kind, params, rcs, power, displacement=np.zeros(3)):
        self.kind = kind
        self.params = params
        self.rcs = rcs
        self.power = power
        self.displacement = np.asarray(displacement, dtype=np.float64)

    @property
    def moving(self) -> bool:
        return bool(np.any(self.displacement != 0))

    def sample(self, rng, n):
        p = self.params
        if self.kind == "segment":
            t = rng.uniform(0, 1, n)[:, None]
            base = p["a"] + t * (p["b"] - p["a"])
            z = rng.uniform(p["z0"], p["z1"], n)
            return np.column_stack([base[:, 0], base[:, 1], z])
        if self.kind == "blob":
            return p["c"] + rng.normal(0, p["sigma"], size=(n, 3))
        if self.kind == "pole":
            xy = p["c"] + rng.normal(0, p["r"], size=(n, 2))
            z = rng.uniform(p["z0"], p["z1"], n)
            return np.column_stack([xy, z])
        # box: points on the surface facing any direction
        c, half, yaw = p["c"], p["half"], p["yaw"]
        local = rng.uniform(-1, 1, size=(n, 3)) * half
        face = rng.integers(0, 3, n)
        sign = rng.choice([-1.0, 1.0], n)
        local[np.arange(n), face] = sign * half[face]
        return local @ yaw_rotation(yaw).T + c


def _extent(s: _Structure) -> float:
    """Relative point budget among extended structures: segment length, or a
    fixed share for poles."""
    if s.kind == "segment":
        return float(np.linalg.norm(s.params["b"] - s.params["a"]))
    return 3.0


def _point_budget(statics, cfg: SceneConfig) -> np.ndarray:
    blob = np.array([s.kind == "blob" for s in statics])
    ext = np.array([0.0 if b else _extent(s) for s, b in zip(statics, blob)])
    share = cfg.reflector_share if blob.any() else 0.0
    w = np.where(blob, share / max(blob.sum(), 1), (1.0 - share) * ext / ext.sum())
    return w / w.sum()


def _in_fov(points, cfg: SceneConfig):
    r = np.linalg.norm(points, axis=1)
    az = np.degrees(np.arctan2(points[:, 1], points[:, 0]))
    el = np.degrees(np.arcsin(np.clip(points[:, 2] / np.maximum(r, 1e-12), -1, 1)))
    return (r >= cfg.min_range) & (r <= cfg.max_range) & (np.abs(az) <= cfg.fov[0]) & (np.abs(el) <= cfg.fov[1])


def _visible_sample(rng, structure, n, cfg, to_frame, max_tries=200):
    """Draw ``n`` points of ``structure`` that fall in the field of view of ``to_frame``."""
    out = []
    need = n
    for _ in range(max_tries):
        if need <= 0:
            break
        world = structure.sample(rng, max(4 * need, 8))
        keep = _in_fov(to_frame(world), cfg)
        pts = world[keep][:need]
        out.append(pts)
        need -= len(pts)
    if need > 0:
        return None
    return np.concatenate(out, axis=0)


def _build_scene(rng, cfg: SceneConfig):
    statics = []
    half_width = rng.uniform(4.0, 9.0)
    for side in (-1.0, 1.0):
        y = side * (half_width + rng.uniform(-0.5, 0.5))
        statics.append(_Structure("segment", dict(a=np.array([3.0, y]), b=np.array([70.0, y]), z0=-0.6, z1=0.4),
                                  rng.uniform(-5, 5), rng.uniform(10, 20)))
    for _ in range(rng.integers(3, 6)):
        r = rng.uniform(10, 65)
        az = np.radians(rng.uniform(-50, 50))
        a = r * np.array([np.cos(az), np.sin(az)])
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(5, 20)
        b = a + length * np.array([np.cos(ang), np.sin(ang)])
        statics.append(_Structure("segment", dict(a=a, b=b, z0=-1.0, z1=2.0),
                                  rng.uniform(5, 20), rng.uniform(20, 35)))
    for _ in range(rng.integers(4, 9)):
        r = rng.uniform(6, 70)
        az = np.radians(rng.uniform(-55, 55))
        c = r * np.array([np.cos(az), np.sin(az)])
        statics.append(_Structure("pole", dict(c=c, r=0.15, z0=-1.0, z1=3.0),
                                  rng.uniform(-10, 0), rng.uniform(0, 10)))
    for _ in range(cfg.n_reflectors):
        r = rng.uniform(8, 50)
        az = np.radians(rng.uniform(-50, 50))
        c = np.array([r * np.cos(az), r * np.sin(az), rng.uniform(-0.5, 1.0)])
        statics.append(_Structure("blob", dict(c=c, sigma=cfg.reflector_sigma),
                                  rng.uniform(10, 25), rng.uniform(30, 45)))
    movers = []
    for _ in range(cfg.n_movers):
        r = rng.uniform(8, 45)
        az = np.radians(rng.uniform(-35, 35))
        c = np.array([r * np.cos(az), r * np.sin(az), 0.0])
        direction = rng.choice([-1.0, 1.0])
        yaw = rng.normal(0, 0.05) + (0.0 if direction > 0 else np.pi)
        speed = rng.uniform(*cfg.mover_speed)
        d = speed * cfg.dt * np.array([np.cos(yaw), np.sin(yaw), 0.0])
        movers.append(_Structure("box", dict(c=c, half=np.array([2.2, 0.9, 0.75]), yaw=yaw),
                                 rng.uniform(10, 20), rng.uniform(30, 40), d))
    return statics, movers


def _ego_transforms(rng, cfg: SceneConfig):
    """Sensor pose of the target frame in the source frame, and the pose
    implied by the instantaneous velocity (used for radial velocities)."""
    v = rng.uniform(*cfg.ego_speed)
    w = rng.uniform(*cfg.ego_yaw_rate)
    yaw = w * cfg.dt
    heading = np.array([np.cos(yaw / 2), np.sin(yaw / 2), 0.0])
    dist = v * cfg.dt + 0.5 * cfg.ego_acceleration * cfg.dt ** 2
    pose = RigidTransform(yaw_rotation(yaw), dist * heading)
    inst = RigidTransform(yaw_rotation(yaw), v * cfg.dt * heading)
    return pose, inst


def _flow(points, displacement, inv_pose: RigidTransform):
    return inv_pose.apply(points + displacement) - points


def _radial_velocity(points, flow, dt):
    return np.einsum("ij,ij->i", flow, points) / (np.linalg.norm(points, axis=1) * dt)


def _ghosts(rng, n, cfg: SceneConfig):
    r = rng.uniform(cfg.min_range, cfg.max_range, n)
    az = np.radians(rng.uniform(-cfg.fov[0], cfg.fov[0], n))
    el = np.radians(rng.uniform(-cfg.fov[1], cfg.fov[1], n))
    pos = spherical_to_cartesian(r, az, el).reshape(-1, 3)
    feats = np.column_stack([rng.normal(0, 5, n), rng.uniform(-15, 25, n), rng.uniform(0, 40, n)])
    return pos, feats


def generate_pair(cfg: SceneConfig, index: int = 0):
    """One synthetic frame pair with labels.  Deterministic in (cfg.seed, index)."""
    pair, labels, _ = _generate(cfg, index)
    return pair, labels


def source_clusters(cfg: SceneConfig, index: int = 0) -> np.ndarray:
    """Structure id of every source point of pair ``index`` (-1 for ghosts)."""
    return _generate(cfg, index)[2]


def _generate(cfg: SceneConfig, index: int):
    rng = pair_rng(cfg.seed, index)
    for _attempt in range(50):
        result = _try_generate(rng, cfg)
        if result is not None:
            return result
    raise ConfigInvalidError("could not place all points in the field of view; check fov/range")


def _try_generate(rng, cfg: SceneConfig):
    statics, movers = _build_scene(rng, cfg)
    pose, inst_pose = _ego_transforms(rng, cfg)
    inv_pose = pose.inverse()
    inv_inst = inst_pose.inverse()

    def identity(p):
        return p

    def frame_sets(to_frame, world_shift):
        """Sample every structure; returns per-point world positions and owners."""
        pts, owner = [], []
        counts = rng.multinomial(cfg.n_static, _point_budget(statics, cfg))
        for i, (s, n) in enumerate(zip(statics, counts)):
            if n == 0:
                continue
            p = _visible_sample(rng, s, n, cfg, to_frame)
            if p is None:
                return None
            pts.append(p)
            owner += [i] * n
        for j, s in enumerate(movers):
            if cfg.points_per_mover == 0:
                continue
            shift = s.displacement if world_shift else 0.0
            p = _visible_sample(rng, _Shifted(s, shift), cfg.points_per_mover, cfg, to_frame)
            if p is None:
                return None
            pts.append(p)
            owner += [len(statics) + j] * cfg.points_per_mover
        return np.concatenate(pts, axis=0), np.array(owner)

    structures = statics + movers
    src = frame_sets(identity, world_shift=False)
    if src is None:
        return None
    dst = frame_sets(inv_pose.apply, world_shift=True)
    if dst is None:
        return None

    # source frame
    x_world, own_x = src
    x = x_world + rng.normal(0, cfg.position_noise, size=x_world.shape) if cfg.position_noise else x_world.copy()
    disp = np.array([structures[o].displacement for o in own_x])
    flow = _flow(x, disp, inv_pose)
    rrv = _radial_velocity(x, _flow(x, disp, inv_inst), cfg.dt)
    moving = np.array([structures[o].moving for o in own_x])

    # target frame: express moved world samples in the target sensor frame
    y_world, own_y = dst
    y = inv_pose.apply(y_world)
    if cfg.position_noise:
        y = y + rng.normal(0, cfg.position_noise, size=y.shape)
    disp_q = np.array([inv_pose.rotation @ structures[o].displacement for o in own_y])
    rrv_y = _radial_velocity(y, _flow(y, disp_q, inv_inst), cfg.dt)

    def appearance(owner):
        rcs = np.array([structures[o].rcs for o in owner]) + rng.normal(0, 1.0, len(owner))
        power = np.array([structures[o].power for o in owner]) + rng.normal(0, 1.0, len(owner))
        return rcs, power

    rcs_x, pow_x = appearance(own_x)
    rcs_y, pow_y = appearance(own_y)
    if cfg.rrv_noise:
        rrv = rrv + rng.normal(0, cfg.rrv_noise, len(rrv))
        rrv_y = rrv_y + rng.normal(0, cfg.rrv_noise, len(rrv_y))

    n_real = len(x)
    n_ghost = int(round(cfg.outlier_fraction * n_real / (1.0 - cfg.outlier_fraction)))
    gx, gfx = _ghosts(rng, n_ghost, cfg)
    gy, gfy = _ghosts(rng, n_ghost, cfg)

    src_pos = np.concatenate([x, gx])
    src_feat = np.concatenate([np.column_stack([rrv, rcs_x, pow_x]), gfx])
    dst_pos = np.concatenate([y, gy])
    dst_feat = np.concatenate([np.column_stack([rrv_y, rcs_y, pow_y]), gfy])
    gt_flow = np.concatenate([flow, np.zeros((n_ghost, 3))])
    gt_moving = np.concatenate([moving, np.zeros(n_ghost, bool)])
    valid = np.concatenate([np.ones(n_real, bool), np.zeros(n_ghost, bool)])
    clusters = np.concatenate([own_x, np.full(n_ghost, -1)])

    perm_s = rng.permutation(len(src_pos))
    perm_t = rng.permutation(len(dst_pos))
    pair = FramePair(RadarFrame(src_pos[perm_s], src_feat[perm_s], 0.0),
                     RadarFrame(dst_pos[perm_t], dst_feat[perm_t], cfg.dt), cfg.dt)
    labels = FrameLabels(gt_flow[perm_s], gt_moving[perm_s], inv_pose, valid[perm_s])
    return pair, labels, clusters[perm_s]


class _Shifted:
    """A structure sampled after its world displacement."""

    def __init__(self, s: _Structure, shift):
        self.s = s
        self.shift = shift

    def sample(self, rng, n):
        return self.s.sample(rng, n) + self.shift


# --- record files ----------------------------------------------------------------

def write_record(path, pair: FramePair, labels: FrameLabels) -> None:
    """Little-endian binary record; see README for the layout."""
    n1, n2 = len(pair.source), len(pair.target)
    parts = [
        RECORD_MAGIC,
        struct.pack("<IIId", RECORD_VERSION, n1, n2, pair.dt),
        np.ascontiguousarray(pair.source.as_array(), dtype="<f8").tobytes(),
        np.ascontiguousarray(pair.target.as_array(), dtype="<f8").tobytes(),
        np.ascontiguousarray(labels.gt_flow, dtype="<f8").tobytes(),
        labels.gt_moving.astype(np.uint8).tobytes(),
        labels.valid.astype(np.uint8).tobytes(),
        np.ascontiguousarray(labels.gt_ego.to_row_major(), dtype="<f8").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def read_record(path):
    buf = Path(path).read_bytes()
    if buf[:4] != RECORD_MAGIC:
        raise ValueError(f"{path}: not a radar frame record")
    version, n1, n2, dt = struct.unpack_from("<IIId", buf, 4)
    if version != RECORD_VERSION:
        raise ValueError(f"{path}: unsupported record version {version}")
    off = 4 + struct.calcsize("<IIId")

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    src = take(n1 * 6, "<f8").reshape(n1, 6).astype(np.float64)
    dst = take(n2 * 6, "<f8").reshape(n2, 6).astype(np.float64)
    flow = take(n1 * 3, "<f8").reshape(n1, 3).astype(np.float64)
    moving = take(n1, np.uint8).astype(bool)
    valid = take(n1, np.uint8).astype(bool)
    ego = RigidTransform.from_row_major(take(12, "<f8").astype(np.float64))
    pair = FramePair(RadarFrame.from_array(src, 0.0), RadarFrame.from_array(dst, dt), dt)
    return pair, FrameLabels(flow, moving, ego, valid)


# --- datasets ---------------------------------------------------------------------

def split_counts(n_pairs: int, ratios) -> list:
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != 3 or (ratios < 0).any() or abs(ratios.sum() - 1.0) > 1e-9:
        raise ConfigInvalidError("split ratios must be three non-negative numbers summing to 1")
    raw = ratios * n_pairs
    counts = np.floor(raw + 1e-9).astype(int)
    rest = n_pairs - counts.sum()
    for i in np.argsort(-(raw - counts), kind="stable")[:rest]:
        counts[i] += 1
    return counts.tolist()


def _manifest_text(split, seed, cfg: SceneConfig, names, first_index) -> str:
    lines = [f"split = {split}", f"seed = {seed}", f"first_index = {first_index}",
             f"count = {len(names)}", "config = " + json.dumps(cfg.to_dict(), sort_keys=True)]
    lines += [f"record = {n}" for n in names]
    return "\n".join(lines) + "\n"


def read_manifest(path) -> dict:
    out = {"records": []}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        if key == "record":
            out["records"].append(value)
        elif key == "config":
            out["config"] = SceneConfig.from_dict(json.loads(value))
        elif key in ("seed", "first_index", "count"):
            out[key] = int(value)
        else:
            out[key] = value
    return out


def generate_dataset(cfg: SceneConfig, n_pairs: int, split_ratios, out_dir) -> dict:
    """Write train/val/test splits of record files plus a manifest per split.

    Returns ``{split: manifest_path}``.
    """
    counts = split_counts(n_pairs, split_ratios)
    out_dir = Path(out_dir)
    manifests = {}
    index = 0
    for split, count in zip(SPLITS, counts):
        d = out_dir / split
        d.mkdir(parents=True, exist_ok=True)
        names = []
        first = index
        for _ in range(count):
            pair, labels = generate_pair(cfg, index)
            name = f"pair_{index:06d}.r4df"
            write_record(d / name, pair, labels)
            names.append(name)
            index += 1
        manifest = d / "manifest.txt"
        manifest.write_text(_manifest_text(split, cfg.seed, cfg, names, first))
        manifests[split] = manifest
    return manifests


def regenerate_split(manifest_path, out_dir) -> list:
    """Rebuild the records listed in a manifest into ``out_dir``."""
    m = read_manifest(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, name in enumerate(m["records"]):
        pair, labels = generate_pair(m["config"], m["first_index"] + k)
        write_record(out_dir / name, pair, labels)
        paths.append(out_dir / name)
    (out_dir / "manifest.txt").write_text(Path(manifest_path).read_text())
    return paths


def load_split(split_dir) -> list:
    """All (pair, labels) records of a split directory, in manifest order."""
    split_dir = Path(split_dir)
    manifest = split_dir / "manifest.txt"
    if manifest.exists():
        names = read_manifest(manifest)["records"]
    else:
        names = sorted(p.name for p in split_dir.glob("*.r4df"))
    return [read_record(split_dir / n) for n in names]


def record_paths(split_dir) -> list:
    split_dir = Path(split_dir)
    manifest = split_dir / "manifest.txt"
    if manifest.exists():
        return [split_dir / n for n in read_manifest(manifest)["records"]]
    return sorted(split_dir.glob("*.r4df"))
