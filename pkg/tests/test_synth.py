import numpy as np
import pytest

from radarflow.core import ConfigInvalidError
from radarflow.geometry import kabsch
from radarflow.synth import (
    SceneConfig, generate_dataset, generate_pair, load_split, read_manifest, read_record,
    regenerate_split, source_clusters, split_counts, write_record,
)


def _residual(pair, labels):
    x = pair.source.positions
    radial = (labels.gt_flow * x).sum(1) / np.linalg.norm(x, axis=1)
    return radial - pair.source.rrv * pair.dt


def test_defaults():
    c = SceneConfig()
    assert c.dt == 0.1 and c.max_range == 75.0 and c.outlier_fraction == 0.2
    assert c.fov == (60.0, 10.0)


@pytest.mark.parametrize("bad", [dict(outlier_fraction=0.6), dict(dt=0.0), dict(n_static=2),
                                 dict(ego_speed=(5, 1)), dict(fov=(95, 10)), dict(rrv_noise=-1)])
def test_invalid_config(bad):
    with pytest.raises(ConfigInvalidError):
        SceneConfig(**bad)


def test_static_world_has_zero_flow_and_rrv():
    cfg = SceneConfig(seed=3, ego_speed=(0, 0), ego_yaw_rate=(0, 0), n_movers=0).noiseless()
    pair, labels = generate_pair(cfg, 0)
    assert np.array_equal(labels.gt_flow, np.zeros_like(labels.gt_flow))
    assert np.array_equal(pair.source.rrv, np.zeros(len(pair.source)))
    assert not labels.gt_moving.any()


def test_pure_translation_flow():
    cfg = SceneConfig(seed=4, ego_speed=(10, 10), ego_yaw_rate=(0, 0), n_movers=0).noiseless()
    pair, labels = generate_pair(cfg, 0)
    assert np.allclose(labels.gt_flow, [-1.0, 0.0, 0.0], atol=1e-12)
    assert np.abs(_residual(pair, labels)).max() < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_noiseless_doppler_relation_exact(seed):
    pair, labels = generate_pair(SceneConfig(seed=seed).noiseless(), seed)
    assert np.abs(_residual(pair, labels)[labels.valid]).max() < 1e-12


def test_ego_recovered_from_static_points():
    pair, labels = generate_pair(SceneConfig(seed=8).noiseless(), 0)
    st = ~labels.gt_moving & labels.valid
    x = pair.source.positions[st]
    t = kabsch(x, x + labels.gt_flow[st])
    assert np.abs(t.rotation - labels.gt_ego.rotation).max() < 1e-9
    assert np.abs(t.translation - labels.gt_ego.translation).max() < 1e-9


def test_movers_labelled_and_faster_than_ego(default_pair):
    pair, labels = default_pair
    cfg = SceneConfig()
    assert labels.gt_moving.sum() == cfg.n_movers * cfg.points_per_mover
    ego_flow = labels.gt_ego.apply(pair.source.positions) - pair.source.positions
    extra = np.linalg.norm(labels.gt_flow - ego_flow, axis=1)
    assert (extra[labels.gt_moving] > 0.3).all()
    assert np.allclose(extra[~labels.gt_moving & labels.valid], 0, atol=1e-9)


def test_outliers_and_sizes(default_pair):
    pair, labels = default_pair
    n = len(pair.source)
    assert n == 256 and len(pair.target) == 256
    assert (~labels.valid).sum() == round(0.2 * 205 / 0.8)
    assert not labels.gt_moving[~labels.valid].any()
    assert np.array_equal(labels.gt_flow[~labels.valid], np.zeros(((~labels.valid).sum(), 3)))


def test_frames_in_field_of_view(default_pair):
    pair, _ = default_pair
    cfg = SceneConfig()
    for frame in (pair.source, pair.target):
        r = np.linalg.norm(frame.positions, axis=1)
        az = np.degrees(np.arctan2(frame.positions[:, 1], frame.positions[:, 0]))
        assert r.max() <= cfg.max_range + 0.5
        assert np.abs(az).max() <= cfg.fov[0] + 2.0


def test_target_is_not_a_copy(default_pair):
    pair, labels = default_pair
    warped = pair.source.positions + labels.gt_flow
    d = np.linalg.norm(warped[:, None] - pair.target.positions[None], axis=2).min(1)
    assert np.median(d[labels.valid]) > 1e-3


def test_determinism():
    a = generate_pair(SceneConfig(seed=9), 3)
    b = generate_pair(SceneConfig(seed=9), 3)
    assert np.array_equal(a[0].source.as_array(), b[0].source.as_array())
    assert np.array_equal(a[0].target.as_array(), b[0].target.as_array())
    assert np.array_equal(a[1].gt_flow, b[1].gt_flow)
    c = generate_pair(SceneConfig(seed=9), 4)
    assert not np.array_equal(a[0].source.as_array(), c[0].source.as_array())


def test_appearance_carries_cluster_identity():
    cfg = SceneConfig(seed=2)
    pair, labels = generate_pair(cfg, 0)
    cl = source_clusters(cfg, 0)
    real = cl >= 0
    for ch in (1, 2):  # rcs, power
        v = pair.source.features[real, ch]
        ids = cl[real]
        within = np.mean([v[ids == k].var() for k in np.unique(ids) if (ids == k).sum() > 1])
        between = np.var([v[ids == k].mean() for k in np.unique(ids)])
        assert within < between


def test_noise_statistics():
    cfg = SceneConfig(seed=1, position_noise=0.0, outlier_fraction=0.0, rrv_noise=0.05)
    res = np.concatenate([_residual(*generate_pair(cfg, i)) for i in range(10)])
    sigma = cfg.rrv_noise * cfg.dt
    assert res.std() == pytest.approx(sigma, rel=0.1)
    assert np.mean(np.abs(res) <= 3 * sigma) > 0.99


def test_acceleration_knob_breaks_relation():
    cfg = SceneConfig(seed=1, ego_acceleration=5.0, n_movers=0).noiseless()
    pair, labels = generate_pair(cfg, 0)
    assert np.abs(_residual(pair, labels)).max() > 1e-4


def test_split_counts():
    assert split_counts(10, (0.6, 0.2, 0.2)) == [6, 2, 2]
    assert split_counts(400, (0.75, 0.125, 0.125)) == [300, 50, 50]
    assert sum(split_counts(7, (0.5, 0.25, 0.25))) == 7
    with pytest.raises(ConfigInvalidError):
        split_counts(10, (0.5, 0.2, 0.2))


def test_record_roundtrip(tmp_path, default_pair):
    pair, labels = default_pair
    write_record(tmp_path / "a.r4df", pair, labels)
    p2, l2 = read_record(tmp_path / "a.r4df")
    assert np.array_equal(p2.source.as_array(), pair.source.as_array())
    assert np.array_equal(p2.target.as_array(), pair.target.as_array())
    assert p2.dt == pair.dt
    assert np.array_equal(l2.gt_flow, labels.gt_flow)
    assert np.array_equal(l2.gt_moving, labels.gt_moving)
    assert np.array_equal(l2.valid, labels.valid)
    assert np.array_equal(l2.gt_ego.to_row_major(), labels.gt_ego.to_row_major())
    raw = (tmp_path / "a.r4df").read_bytes()
    assert raw[:4] == b"R4DF"
    n1 = len(pair.source)
    assert len(raw) == 4 + 20 + n1 * 48 + len(pair.target) * 48 + n1 * 24 + 2 * n1 + 96


def test_record_rejects_foreign_file(tmp_path):
    (tmp_path / "x.r4df").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError):
        read_record(tmp_path / "x.r4df")


def test_dataset_layout_and_regeneration(tmp_path):
    cfg = SceneConfig(seed=7)
    manifests = generate_dataset(cfg, 10, (0.6, 0.2, 0.2), tmp_path / "d")
    counts = {k: len(read_manifest(v)["records"]) for k, v in manifests.items()}
    assert counts == {"train": 6, "val": 2, "test": 2}
    m = read_manifest(manifests["val"])
    assert m["seed"] == 7 and m["config"] == cfg and m["first_index"] == 6
    regenerate_split(manifests["val"], tmp_path / "again")
    for name in m["records"]:
        assert (tmp_path / "again" / name).read_bytes() == (tmp_path / "d" / "val" / name).read_bytes()
    data = load_split(tmp_path / "d" / "test")
    assert len(data) == 2
    for pair, labels in data:
        res = _residual(pair, labels)[labels.valid]
        assert np.abs(res).max() <= 5 * cfg.rrv_noise * cfg.dt
        assert np.mean(np.abs(res) <= 3 * cfg.rrv_noise * cfg.dt) > 0.98


def test_dataset_regeneration_is_byte_identical(tmp_path):
    cfg = SceneConfig(seed=3)
    generate_dataset(cfg, 4, (0.5, 0.25, 0.25), tmp_path / "a")
    generate_dataset(cfg, 4, (0.5, 0.25, 0.25), tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 7
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
