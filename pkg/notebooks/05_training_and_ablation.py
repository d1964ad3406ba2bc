# ---
# jupyter:
#   jupytext:
#     formats: py:light
#     text_representation:
#       extension: .py
#       format_name: light
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# # Training, baselines and the ablation variants
#
# A short run on a small sample so the notebook finishes in a few minutes. The
# acceptance suite runs the same comparison over 5 seeds at a larger scale.

import time

import numpy as np

from aesm2 import ModelConfig, SyntheticSpec, TrainConfig, evaluate, generate_synthetic
from aesm2.evaluation import metric_table
from aesm2.training import fit, selected_kl_sum

SEED = 0
data = generate_synthetic(SyntheticSpec(n_train=20_000, n_val=5_000, n_test=10_000), seed=SEED)
schema = data.train.schema

variants = {
    "aesm2": ("aesm2", {}),
    "w/o auxloss": ("aesm2", dict(lambda_specific=0.0, lambda_shared=0.0)),
    "w/o noise&auxloss": ("aesm2", dict(lambda_specific=0.0, lambda_shared=0.0, use_noise=False)),
    "mmoe": ("mmoe", {}),
    "hard_sharing": ("hard_sharing", {}),
}

reports, runs = {}, {}
for name, (kind, over) in variants.items():
    t0 = time.perf_counter()
    res = fit(kind, ModelConfig.for_schema(schema, seed=SEED, **over), data.train, data.val,
              TrainConfig(epochs=6, seed=SEED))
    reports[name] = evaluate(res.model, data.test)
    runs[name] = res
    print(f"{name:<18} best epoch {res.best_epoch}  {time.perf_counter() - t0:.0f}s")

# One row per model, one column per scenario and task, ALL last.

print(metric_table(reports))

# On one seed and 20k rows the differences between the three AESM2 variants
# are within seed noise. The 5-seed acceptance sweep is the comparison to
# trust. The small VP&BS scenario shows the clearest gap between hard sharing
# and the expert models.

# ## Sharper selection with the auxiliary loss
#
# Every step logs the KL of the selected experts to their references, even
# when the loss weight is zero, so the two runs can be compared directly.

for name in ("aesm2", "w/o auxloss"):
    steps = runs[name].steps
    first, last = selected_kl_sum(steps, epoch=1), selected_kl_sum(steps)
    print(f"{name:<12} mean selected KL: first epoch {first:.3f}  last epoch {last:.3f}")
