"""Desk-scale comparison of the trained model against the rigid baselines and ablations.

For every seed a fresh synthetic dataset is generated and three models are
trained: the full configuration, one with the plain (hard) Chamfer loss and
one without the RRV input channel.  On the test split five orderings are
checked:

    a  full model Avg EPE            < rigid-only Avg EPE
    b  full model moving-point EPE   < ICP moving-point EPE
    c  full model Stat. RNE          <= same weights without refinement
    d  full model Avg RNE            < hard-Chamfer model Avg RNE
    e  no-RRV model Avg RNE          > full model Avg RNE

Run ``python -m radarflow.experiments --help`` for the command line.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

from threadpoolctl import threadpool_limits

from .baselines import icp, rigid_only_flow
from .core import HyperParams
from .metrics import aggregate, evaluate_pair, mean_epe_by_class
from .pipeline import evaluate_model
from .rofe import RofeModel
from .synth import SceneConfig, generate_pair, split_counts
from .train import TrainConfig, train

log = logging.getLogger(__name__)

VARIANTS = {
    "full": {},
    "hard_chamfer": {"hard_chamfer": True},
    "no_rrv": {"features": ("rcs", "power")},
}
CHECKS = {
    "a": "trained Avg EPE < rigid-only Avg EPE",
    "b": "trained Mov. EPE < ICP Mov. EPE",
    "c": "with-refinement Stat. RNE <= without-refinement Stat. RNE",
    "d": "soft-Chamfer Avg RNE < hard-Chamfer Avg RNE",
    "e": "no-RRV Avg RNE > full Avg RNE",
}


@dataclass(frozen=True)
class ProtocolConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    n_train: int = 300
    n_val: int = 50
    n_test: int = 50
    epochs: int = 20
    max_steps_per_epoch: Optional[int] = None
    required: int = 4  # seeds on which each ordering must hold

    @property
    def n_pairs(self) -> int:
        return self.n_train + self.n_val + self.n_test


@dataclass
class SeedOutcome:
    seed: int
    scores: dict  # name -> {"avg_epe", "avg_rne", "stat_rne", "mov_epe", ...}
    checks: dict  # letter -> bool
    seconds: dict = field(default_factory=dict)


def _scores(results) -> dict:
    rep = aggregate(results)
    stat_epe, mov_epe = mean_epe_by_class(results)
    return {**rep.as_dict(), "stat_epe": stat_epe, "mov_epe": mov_epe}


def _baseline_scores(test, method: Callable) -> dict:
    return _scores([evaluate_pair(pair, labels, method(pair)) for pair, labels in test])


def make_splits(seed: int, pcfg: ProtocolConfig):
    cfg = SceneConfig(seed=seed)
    data = [generate_pair(cfg, i) for i in range(pcfg.n_pairs)]
    n_tr, n_va, _ = split_counts(pcfg.n_pairs, (pcfg.n_train / pcfg.n_pairs, pcfg.n_val / pcfg.n_pairs,
                                                pcfg.n_test / pcfg.n_pairs))
    return data[:n_tr], data[n_tr:n_tr + n_va], data[n_tr + n_va:]


def run_seed(seed: int, pcfg: ProtocolConfig = ProtocolConfig(), out_dir=None) -> SeedOutcome:
    train_data, val_data, test_data = make_splits(seed, pcfg)
    hp = HyperParams()
    scores, seconds = {}, {}
    for name, overrides in VARIANTS.items():
        tc = TrainConfig(epochs=pcfg.epochs, seed=seed, max_steps_per_epoch=pcfg.max_steps_per_epoch,
                         **overrides)
        model = RofeModel(hp, seed=seed, feature_mask=tc.feature_mask)
        t0 = time.perf_counter()
        run_dir = None if out_dir is None else Path(out_dir) / f"seed{seed}" / name
        res = train(model, train_data, val_data, tc, run_dir)
        seconds[name] = time.perf_counter() - t0
        model.load_state_dict(res.best_state)
        _, results = evaluate_model(model, test_data, hp.zeta, True)
        scores[name] = _scores(results)
        if name == "full":
            _, results = evaluate_model(model, test_data, hp.zeta, False)
            scores["full_no_refinement"] = _scores(results)
        log.info("seed %d %s done in %.0f s: %s", seed, name, seconds[name], scores[name])
    scores["rigid_only"] = _baseline_scores(test_data, rigid_only_flow)
    scores["icp"] = _baseline_scores(test_data, lambda p: icp(p).flow)
    return SeedOutcome(seed, scores, evaluate_checks(scores), seconds)


def evaluate_checks(s: dict) -> dict:
    full = s["full"]
    return {
        "a": full["avg_epe"] < s["rigid_only"]["avg_epe"],
        "b": full["mov_epe"] < s["icp"]["mov_epe"],
        "c": full["stat_rne"] <= s["full_no_refinement"]["stat_rne"],
        "d": full["avg_rne"] < s["hard_chamfer"]["avg_rne"],
        "e": s["no_rrv"]["avg_rne"] > full["avg_rne"],
    }


def summarize(outcomes, required: int) -> dict:
    """letter -> (seeds holding, passed)."""
    out = {}
    for letter in CHECKS:
        held = sum(o.checks[letter] for o in outcomes)
        out[letter] = (held, held >= required)
    return out


def run_protocol(pcfg: ProtocolConfig = ProtocolConfig(), out_dir=None) -> tuple[list, dict]:
    outcomes = []
    for seed in pcfg.seeds:
        outcomes.append(run_seed(seed, pcfg, out_dir))
        if out_dir is not None:
            write_results(Path(out_dir) / "results.json", pcfg, outcomes)
    return outcomes, summarize(outcomes, pcfg.required)


def write_results(path, pcfg: ProtocolConfig, outcomes) -> None:
    doc = {"protocol": asdict(pcfg), "seeds": [asdict(o) for o in outcomes],
           "summary": {k: {"held": h, "passed": p} for k, (h, p) in
                       summarize(outcomes, pcfg.required).items()}}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m radarflow.experiments",
                                description="Train and compare the model, ablations and baselines")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--max-steps-per-epoch", type=int)
    p.add_argument("--pairs", type=int, nargs=3, default=[300, 50, 50], metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("radarflow.sfr").setLevel(logging.ERROR)
    pcfg = ProtocolConfig(tuple(a.seeds), *a.pairs, a.epochs, a.max_steps_per_epoch,
                          required=min(4, len(a.seeds)))
    with threadpool_limits(a.threads):
        outcomes, summary = run_protocol(pcfg, a.out)
    for letter, (held, ok) in summary.items():
        print(f"{letter}  {held}/{len(outcomes)}  {'PASS' if ok else 'FAIL'}  {CHECKS[letter]}")
    return 0 if all(ok for _, ok in summary.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
