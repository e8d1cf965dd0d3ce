"""Command-line entry point: generate / train / eval / infer / baseline.

Exit codes: 0 success, 2 usage or configuration error, 3 file I/O error,
4 numerical divergence during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .baselines import icp, rigid_only_flow
from .core import ConfigInvalidError, HyperParams
from .metrics import EvalReport, MetricConfig, aggregate, evaluate_pair
from .pipeline import predict, read_prediction, write_prediction
from .rofe import RofeModel, load_checkpoint, read_checkpoint
from .sfr import static_mask
from .synth import SceneConfig, generate_dataset, load_split, read_record, record_paths
from .train import DivergedLossError, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("radarflow")


class UsageError(Exception):
    pass


def _ratios(text: str):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected three comma-separated numbers") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated numbers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radarflow", description="Self-supervised radar scene flow")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count (1 = bit-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--pairs", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--split", type=_ratios, default=[0.75, 0.125, 0.125], help="train,val,test ratios")
    g.add_argument("--config", help="JSON file with scene settings")
    g.add_argument("--outlier-fraction", type=float)
    g.add_argument("--rrv-noise", type=float)
    g.add_argument("--position-noise", type=float)
    g.add_argument("--n-static", type=int)
    g.add_argument("--n-movers", type=int)

    t = sub.add_parser("train", help="train the network on a generated dataset")
    t.add_argument("--data", required=True, help="dataset root holding train/ and val/")
    t.add_argument("--out", required=True, help="run directory for checkpoints and metrics.log")
    t.add_argument("--config", help='JSON file {"hyperparams": {...}, "train": {...}}')
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--sample-points", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--no-sfr", action="store_true", help="train on the coarse flow only")
    t.add_argument("--zeta", type=float)
    t.add_argument("--disable-loss", action="append", choices=["rd", "sc", "ss"], default=[])
    t.add_argument("--disable-feature", action="append", choices=["rrv", "rcs", "power"], default=[])
    t.add_argument("--hard-chamfer", action="store_true")
    t.add_argument("--uniform-smoothness", action="store_true")
    t.add_argument("--max-steps-per-epoch", type=int)

    e = sub.add_parser("eval", help="score predictions on a split")
    e.add_argument("--data", required=True, help="split directory")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle-gt", action="store_true", help="score the ground truth itself")
    src.add_argument("--predictions", help="directory of prediction files named like the records")
    e.add_argument("--no-sfr", action="store_true")
    e.add_argument("--zeta", type=float)
    e.add_argument("--per-pair", action="store_true")
    e.add_argument("--out", help="write the report here as well as to stdout")

    i = sub.add_parser("infer", help="predict flow, static mask and ego-motion for one record")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--record", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--no-sfr", action="store_true")
    i.add_argument("--zeta", type=float)

    b = sub.add_parser("baseline", help="run a non-learned baseline over a split")
    b.add_argument("--method", choices=["icp", "rigid"], required=True)
    b.add_argument("--data", required=True, help="split directory")
    b.add_argument("--out", help="directory for prediction files")
    b.add_argument("--max-iters", type=int, default=50)
    b.add_argument("--zeta", type=float, default=HyperParams().zeta, help="threshold for the reported mask")
    return p


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _cmd_generate(a) -> int:
    settings = _read_json(a.config) if a.config else {}
    settings["seed"] = a.seed
    for key in ("outlier_fraction", "rrv_noise", "position_noise", "n_static", "n_movers"):
        if getattr(a, key) is not None:
            settings[key] = getattr(a, key)
    try:
        cfg = SceneConfig.from_dict(settings)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    if a.pairs < 1:
        raise UsageError("--pairs must be positive")
    manifests = generate_dataset(cfg, a.pairs, a.split, a.out)
    for path in manifests.values():
        print(path)
    return EXIT_OK


def _train_settings(a):
    conf = _read_json(a.config) if a.config else {}
    unknown = set(conf) - {"hyperparams", "train"}
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    hp = HyperParams.from_dict(conf.get("hyperparams", {}))
    tc = TrainConfig.from_dict(conf.get("train", {}))
    if a.zeta is not None:
        hp = replace(hp, zeta=a.zeta)
    overrides = {k: getattr(a, k) for k in ("epochs", "lr", "lr_decay", "batch_size", "sample_points",
                                            "seed", "max_steps_per_epoch") if getattr(a, k) is not None}
    if a.no_augment:
        overrides["augment"] = False
    if a.no_sfr:
        overrides["use_sfr"] = False
    if a.hard_chamfer:
        overrides["hard_chamfer"] = True
    if a.uniform_smoothness:
        overrides["uniform_smoothness"] = True
    if a.disable_loss:
        overrides["losses"] = tuple(n for n in tc.losses if n not in a.disable_loss)
    if a.disable_feature:
        overrides["features"] = tuple(n for n in tc.features if n not in a.disable_feature)
    return hp, TrainConfig.from_dict({**tc.to_dict(), **overrides})


def _cmd_train(a) -> int:
    hp, tc = _train_settings(a)
    root = Path(a.data)
    for split in ("train", "val"):
        if not (root / split).is_dir():
            raise FileNotFoundError(f"{root / split}: split directory not found")
    train_data = load_split(root / "train")
    val_data = load_split(root / "val")
    model = RofeModel(hp, seed=tc.seed, feature_mask=tc.feature_mask)
    result = train(model, train_data, val_data, tc, a.out)
    print(f"best_epoch = {result.best_epoch}")
    print(f"best_val_avg_rne = {result.best_val_rne:.6g}")
    print(f"checkpoint = {Path(a.out) / 'best.ckpt'}")
    return EXIT_OK


def _model_zeta(checkpoint, zeta):
    if not Path(checkpoint).exists():
        raise FileNotFoundError(f"{checkpoint}: checkpoint not found")
    model = load_checkpoint(checkpoint)
    return model, (model.hp.zeta if zeta is None else zeta)


def _eval_use_sfr(a, checkpoint) -> bool:
    if a.no_sfr:
        return False
    header, _ = read_checkpoint(checkpoint)
    return header.get("extra", {}).get("train_config", {}).get("use_sfr", True)


def _cmd_eval(a) -> int:
    split = Path(a.data)
    paths = record_paths(split)
    if not paths:
        raise FileNotFoundError(f"{split}: no records found")
    cfg = MetricConfig()
    model = None
    if a.checkpoint:
        model, zeta = _model_zeta(a.checkpoint, a.zeta)
        use_sfr = _eval_use_sfr(a, a.checkpoint)
    results = []
    lines = []
    for path in paths:
        pair, labels = read_record(path)
        if a.oracle_gt:
            flow = labels.gt_flow
            moving = labels.gt_moving
        elif a.predictions:
            flow, static_flags, _ = read_prediction(Path(a.predictions) / (path.stem + ".pred"))
            if len(flow) != len(pair.source):
                raise UsageError(f"{path.name}: prediction length does not match the record")
            moving = ~static_flags
        else:
            pred = predict(model, pair, zeta, use_sfr)
            flow, moving = pred.flow, pred.moving
        res = evaluate_pair(pair, labels, flow, cfg, moving)
        results.append(res)
        if a.per_pair:
            r = aggregate([res], cfg)
            lines.append(f"pair {path.name} avg_epe = {r.avg_epe:.6g} avg_rne = {r.avg_rne:.6g}")
    text = aggregate(results, cfg).to_text()
    sys.stdout.write(text)
    for line in lines:
        print(line)
    if a.out:
        Path(a.out).write_text(text)
    return EXIT_OK


def _cmd_infer(a) -> int:
    model, zeta = _model_zeta(a.checkpoint, a.zeta)
    pair, _ = read_record(a.record)
    pred = predict(model, pair, zeta, not a.no_sfr)
    write_prediction(a.out, pred.flow, ~pred.moving, pred.ego)
    print(a.out)
    return EXIT_OK


def _cmd_baseline(a) -> int:
    paths = record_paths(a.data)
    if not paths:
        raise FileNotFoundError(f"{a.data}: no records found")
    out = Path(a.out) if a.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results = []
    for path in paths:
        pair, labels = read_record(path)
        if a.method == "icp":
            res = icp(pair, a.max_iters)
            flow, ego = res.flow, res.transform
        else:
            flow = rigid_only_flow(pair)
            ego = icp(pair, max_iters=1).transform
        mask, _, _ = static_mask(pair, flow, a.zeta)
        results.append(evaluate_pair(pair, labels, flow, MetricConfig(), ~mask.flags))
        if out is not None:
            write_prediction(out / (path.stem + ".pred"), flow, mask.flags, ego)
    sys.stdout.write(aggregate(results).to_text())
    return EXIT_OK


COMMANDS = {"generate": _cmd_generate, "train": _cmd_train, "eval": _cmd_eval,
            "infer": _cmd_infer, "baseline": _cmd_baseline}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.ERROR, format="%(message)s")
    limits = threadpool_limits(a.threads) if a.threads else None
    try:
        return COMMANDS[a.command](a)
    except (ConfigInvalidError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedLossError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        if limits is not None:
            limits.unregister()


if __name__ == "__main__":
    sys.exit(main())
