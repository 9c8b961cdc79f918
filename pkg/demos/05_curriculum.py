"""
More trajectories, same network
===============================

Hold one trajectory out and train a fresh network on one, two, three,
then four of the others. The network never grows, yet the error on the
held-out trajectory tends to fall: the map is stored in a fixed number
of weights.
"""

import sys

from cnnmap.datasets import make_leave_one_out
from cnnmap.experiment import load_dataset, resolve_config
from cnnmap.train import run_curriculum

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 30

cfg = resolve_config("smoke-curriculum", overrides={"hp": {"epochs": EPOCHS}})
bundle = load_dataset(cfg.dataset)
curriculum = make_leave_one_out(bundle, cfg.curriculum["test"])
print(f"test trajectory {curriculum.test.name}, {len(curriculum)} stages")

for stage, report in run_curriculum(cfg.arch_spec(), curriculum, cfg.hp, cfg.input_config(), cfg.init_std):
    print(f"stage {stage + 1}: trained on {report.meta['train']}, "
          f"{report.meta['param_count']:,d} parameters -> {report.summary()}")
