import subprocess
import sys

import numpy as np
import pytest

from radarflow import train as train_mod
from radarflow.cli import main
from radarflow.core import RigidTransform
from radarflow.losses import LossBreakdown
from radarflow.metrics import EvalReport, aggregate, evaluate_pair
from radarflow.pipeline import predict, read_prediction, write_prediction
from radarflow.rofe import load_checkpoint
from radarflow.synth import read_manifest, read_record, record_paths


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["generate", "--pairs", "10", "--seed", "7", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    code = main(["--threads", "1", "train", "--data", str(dataset), "--out", str(run), "--epochs", "1",
                 "--sample-points", "32", "--max-steps-per-epoch", "3", "--seed", "1"])
    assert code == 0
    return run


def test_help_exits_zero():
    out = subprocess.run([sys.executable, "-m", "radarflow.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "generate" in out.stdout
    for cmd in ("generate", "train", "eval", "infer", "baseline"):
        assert main([cmd, "--help"]) == 0


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["generate", "--pairs", "4", "--out", str(tmp_path), "--outlier-fraction", "0.6"]) == 2
    assert "outlier" in capsys.readouterr().err
    assert main(["generate", "--pairs", "0", "--out", str(tmp_path)]) == 2
    assert main(["generate", "--pairs", "4", "--out", str(tmp_path), "--split", "0.5,0.5"]) == 2


def test_generate_layout(dataset, capsys):
    counts = {s: len(read_manifest(dataset / s / "manifest.txt")["records"]) for s in ("train", "val", "test")}
    assert sum(counts.values()) == 10
    assert len(record_paths(dataset / "train")) == counts["train"]


def test_generate_rerun_identical(dataset, tmp_path):
    assert main(["generate", "--pairs", "10", "--seed", "7", "--out", str(tmp_path)]) == 0
    for f in sorted(p.relative_to(dataset) for p in dataset.rglob("*") if p.is_file()):
        assert (tmp_path / f).read_bytes() == (dataset / f).read_bytes()


def test_missing_inputs_are_io_errors(dataset, tmp_path, capsys):
    assert main(["eval", "--data", str(dataset / "test"), "--checkpoint", str(tmp_path / "nope.ckpt")]) == 3
    assert "nope.ckpt" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "r")]) == 3
    assert main(["eval", "--data", str(tmp_path), "--oracle-gt"]) == 3


def test_train_run(trained):
    lines = (trained / "metrics.log").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("epoch=1 ")
    assert (trained / "best.ckpt").exists() and (trained / "last.ckpt").exists()


def test_train_bad_config(dataset, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text('{"train": {"lr": -1}}')
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--config", str(conf)]) == 2
    conf.write_text("{not json")
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--config", str(conf)]) == 2


def test_disable_losses_wiring(dataset, tmp_path):
    code = main(["train", "--data", str(dataset), "--out", str(tmp_path), "--epochs", "1",
                 "--sample-points", "32", "--max-steps-per-epoch", "2",
                 "--disable-loss", "sc", "--disable-loss", "ss"])
    assert code == 0
    fields = dict(kv.split("=") for kv in (tmp_path / "metrics.log").read_text().split())
    assert fields["sc"] == "0" and fields["ss"] == "0" and float(fields["rd"]) > 0


def test_disable_feature_and_config_file(dataset, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text('{"hyperparams": {"zeta": 0.2}, "train": {"epochs": 5, "lr": 0.01}}')
    code = main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--config", str(conf),
                 "--epochs", "1", "--sample-points", "32", "--max-steps-per-epoch", "1",
                 "--disable-feature", "rrv"])
    assert code == 0
    m = load_checkpoint(tmp_path / "r" / "best.ckpt")
    assert m.feature_mask == (False, True, True)
    assert m.hp.zeta == 0.2
    line = (tmp_path / "r" / "metrics.log").read_text()
    assert line.startswith("epoch=1 lr=0.01 ")


def test_oracle_gt_is_perfect(dataset, capsys):
    assert main(["eval", "--data", str(dataset / "test"), "--oracle-gt"]) == 0
    rep = EvalReport.from_text(capsys.readouterr().out)
    assert rep.sas == 1.0 and rep.ras == 1.0
    assert rep.avg_epe == 0.0 and rep.avg_rne == 0.0 and rep.stat_rne == 0.0
    assert rep.seg_accuracy == 1.0


def test_infer_then_eval_matches_in_memory(dataset, trained, tmp_path, capsys):
    ckpt = trained / "best.ckpt"
    model = load_checkpoint(ckpt)
    results = []
    preds = tmp_path / "preds"
    preds.mkdir()
    for path in record_paths(dataset / "test"):
        out = preds / (path.stem + ".pred")
        assert main(["infer", "--checkpoint", str(ckpt), "--record", str(path), "--out", str(out)]) == 0
        pair, labels = read_record(path)
        mem = predict(model, pair, model.hp.zeta)
        flow, static, ego = read_prediction(out)
        assert np.array_equal(flow, mem.flow)
        assert len(static) == len(pair.source)
        assert np.array_equal(static, ~mem.moving)
        assert np.allclose(ego.rotation @ ego.rotation.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(ego.rotation) - 1) < 1e-12
        results.append(evaluate_pair(pair, labels, mem.flow, pred_moving=mem.moving))
    capsys.readouterr()
    assert main(["eval", "--data", str(dataset / "test"), "--predictions", str(preds)]) == 0
    from_files = capsys.readouterr().out
    assert main(["eval", "--data", str(dataset / "test"), "--checkpoint", str(ckpt)]) == 0
    from_ckpt = capsys.readouterr().out
    assert from_files == from_ckpt == aggregate(results).to_text()


def test_eval_writes_file_and_per_pair(dataset, trained, tmp_path, capsys):
    out = tmp_path / "report.txt"
    assert main(["eval", "--data", str(dataset / "val"), "--checkpoint", str(trained / "best.ckpt"),
                 "--per-pair", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert out.read_text() in text
    assert text.count("pair ") == len(record_paths(dataset / "val"))


def test_baselines_write_predictions(dataset, tmp_path, capsys):
    assert main(["baseline", "--method", "rigid", "--data", str(dataset / "test"), "--out", str(tmp_path)]) == 0
    rigid = EvalReport.from_text(capsys.readouterr().out)
    assert main(["eval", "--data", str(dataset / "test"), "--predictions", str(tmp_path)]) == 0
    again = EvalReport.from_text(capsys.readouterr().out)
    assert again.avg_epe == rigid.avg_epe
    assert main(["baseline", "--method", "icp", "--data", str(dataset / "test")]) == 0
    icp = EvalReport.from_text(capsys.readouterr().out)
    assert icp.avg_epe is not None and rigid.avg_epe is not None


def test_divergence_exit_code(dataset, tmp_path, monkeypatch):
    monkeypatch.setattr(train_mod, "total_loss", lambda *a: LossBreakdown(float("inf"), float("inf"), 0, 0))
    code = main(["train", "--data", str(dataset), "--out", str(tmp_path), "--epochs", "1",
                 "--sample-points", "32"])
    assert code == 4


def test_prediction_length_mismatch(dataset, tmp_path):
    for path in record_paths(dataset / "test"):
        write_prediction(tmp_path / (path.stem + ".pred"), np.zeros((3, 3)), np.ones(3, bool),
                         RigidTransform.identity())
    assert main(["eval", "--data", str(dataset / "test"), "--predictions", str(tmp_path)]) == 2
