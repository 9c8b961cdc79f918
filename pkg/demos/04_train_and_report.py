"""
Training on a synthetic scene and reporting the errors
======================================================

Train the reduced network on three trajectories of a generated scene,
evaluate it on the fourth, and write the report table and plot data.
This uses the ``smoke`` recipe; set EPOCHS lower for a quicker look.
"""

import sys
import tempfile
from pathlib import Path

from cnnmap.evaluation import build_comparison, evaluate, export_trajectory_plot_data
from cnnmap.experiment import load_dataset, resolve_config
from cnnmap.network import build_model
from cnnmap.train import Samples, fit_input_config, train

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 60

cfg = resolve_config("smoke", overrides={"hp": {"epochs": EPOCHS}})
bundle = load_dataset(cfg.dataset)
train_trajs, test = bundle.by_role("train"), bundle.by_role("test")[0]
print(f"{len(train_trajs)} training trajectories, testing on {test.name}; "
      f"scene diameter {bundle.scene_diameter():.2f} m")

# inputs are centered with channel means measured on the training frames
in_cfg = fit_input_config(train_trajs, cfg.input_config())
model = build_model(cfg.arch_spec(), seed=cfg.hp.seed, std=cfg.init_std)
model.input_config = in_cfg
print(f"{cfg.arch}: {model.num_params():,d} parameters")

before = evaluate(model, test)


def progress(epoch, model, history):
    if epoch % 10 == 0:
        print(f"  epoch {epoch:3d}: train loss {history.epochs[-1].train_loss:.4f}")


model, history = train(model, Samples.from_trajectories(train_trajs, in_cfg), None, cfg.hp, progress)
after = evaluate(model, test, meta={"arch": cfg.arch, "dataset": "synthetic"})
print("untrained:", before.summary())
print("trained:  ", after.summary())
print(f"mean position error is {100 * after.position_mean / bundle.scene_diameter():.1f}% of the scene diameter")

# a comparison table (reference rows only show for their own datasets) and plot-ready CSVs
print(build_comparison([after], references={}).render())
out = Path(tempfile.mkdtemp()) / "plot"
paths = export_trajectory_plot_data(after, train_trajs, test, out)
print("plot data:", sorted(p.name for p in paths.values()))
