"""Train for a few minutes and compare against the rigid baselines.

This is a shortened version of the experiment in ``radarflow.experiments``
(which takes hours on one core).  Expect the trained network to beat the
single-shot rigid fit after a few hundred updates.

Run:  python demos/train_and_compare.py [steps]
"""
import logging
import sys
import tempfile

from threadpoolctl import threadpool_limits

from radarflow.baselines import icp, rigid_only_flow
from radarflow.core import HyperParams
from radarflow.metrics import aggregate, evaluate_pair
from radarflow.pipeline import evaluate_model
from radarflow.rofe import RofeModel
from radarflow.synth import SceneConfig, generate_pair
from radarflow.train import TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
logging.getLogger("radarflow.sfr").setLevel(logging.ERROR)

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 60
scene = SceneConfig(seed=1)
data = [generate_pair(scene, i) for i in range(steps + 20)]
train_data, val_data, test_data = data[:steps], data[steps:steps + 10], data[steps + 10:]

hp = HyperParams()
cfg = TrainConfig(epochs=2, seed=1, max_steps_per_epoch=steps // 2)
model = RofeModel(hp, seed=1)
with threadpool_limits(1), tempfile.TemporaryDirectory() as run_dir:
    result = train(model, train_data, val_data, cfg, run_dir)
model.load_state_dict(result.best_state)


def row(name, rep):
    print(f"{name:24s} EPE {rep.avg_epe:6.3f}   RNE {rep.avg_rne:6.3f}   "
          f"Stat {rep.stat_rne:6.3f}   Mov {rep.mov_rne:6.3f}   SAS {rep.sas:5.3f}   RAS {rep.ras:5.3f}")


print()
row("rigid only", aggregate([evaluate_pair(p, l, rigid_only_flow(p)) for p, l in test_data]))
row("ICP", aggregate([evaluate_pair(p, l, icp(p).flow) for p, l in test_data]))
row("network, no refinement", evaluate_model(model, test_data, hp.zeta, use_sfr=False)[0])
row("network + refinement", evaluate_model(model, test_data, hp.zeta)[0])
