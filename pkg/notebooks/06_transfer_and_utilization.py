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

# # Cross-scenario transfer and expert utilization

import numpy as np

from aesm2 import ModelConfig, SyntheticSpec, TrainConfig, generate_synthetic, transfer_matrix, utilization
from aesm2.training import fit, train_per_scenario

# ## Transfer matrix
#
# Train one model per scenario, test it on every scenario. Entry (i, j) is the
# AUC of the scenario-i model on scenario-j data. Three worlds: unrelated
# scenarios, the default partial sharing, and identical scenarios.

worlds = {
    "independent": SyntheticSpec(level_weights=(0.0, 0.0), n_train=60_000, n_test=20_000),
    "partial 0.3/0.3": SyntheticSpec(n_train=60_000, n_test=20_000),
    "identical": SyntheticSpec(level_weights=(0.0, 0.0), global_weight=1.0, shares=(0.25,) * 4,
                               ctr_base=(0.25,) * 4, cvr_base=(0.15,) * 4, n_train=60_000, n_test=20_000),
}
for name, spec in worlds.items():
    data = generate_synthetic(spec, seed=1)
    cfg = ModelConfig.for_schema(data.train.schema, seed=1)
    models = train_per_scenario("hard_sharing", cfg, data.train, data.val, TrainConfig(epochs=6, patience=2, seed=1))
    parts = data.test.by_scenario()
    tm = transfer_matrix(models, list(parts.values()), scenarios=list(parts))
    print(f"{name}: CTR transfer AUC (rows = trained on)")
    print(np.round(tm.values["ctr"], 3))

# ## Which experts does each scenario use?
#
# Utilization counts how often each expert lands in the specific or shared set.
# Grouping by full scenario path lets scenarios that share a channel be
# compared on the channel layer.

data = generate_synthetic(SyntheticSpec(n_train=40_000, n_val=5_000, n_test=10_000), seed=2)
res = fit("aesm2", ModelConfig.for_schema(data.train.schema, seed=2), data.train, data.val,
          TrainConfig(epochs=5, seed=2))
rep = utilization(res.model, data.test, by="scenario")
labels = data.test.schema.scenario_labels
for layer in ("scenario.0", "scenario.1"):
    print(layer)
    for g in labels:
        print(f"  {g:<6} specific {np.round(rep.specific[layer][g], 2)}  shared {np.round(rep.shared[layer][g], 2)}")

# L1 distance between scenario utilization vectors on the channel layer.
# Scenarios under the same channel pick the same experts there, so they sit
# close together. Across channels they are far apart.

vec = {g: rep.vector("scenario.0", g) for g in labels}
for a in labels:
    print(f"{a:<6}", " ".join(f"{np.abs(vec[a] - vec[b]).sum():5.2f}" for b in labels))
