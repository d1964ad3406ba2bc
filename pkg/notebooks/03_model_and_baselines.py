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

# # The full model and its baselines
#
# Two scenario layers (channel, then domain), two task layers (CTR and CVR
# gates over shared experts), one tower per task, and CTCVR = CTR x CVR.

import numpy as np

from aesm2 import ModelConfig, build_model, default_schema, generate_synthetic
from aesm2.data import SyntheticSpec

schema = default_schema()
cfg = ModelConfig.for_schema(schema, seed=0)
data = generate_synthetic(SyntheticSpec(n_train=0, n_val=0, n_test=500), seed=0)

for kind in ("aesm2", "mmoe", "static_split", "hard_sharing"):
    m = build_model(kind, cfg)
    print(f"{kind:<13} {m.n_parameters():>7} parameters")

# The forward pass returns predictions and a trace with every gating matrix
# and every selection, per instance.

model = build_model("aesm2", cfg)
preds, trace = model.forward(data.test.take(slice(0, 8)))
print("ctr  ", np.round(preds.ctr.data, 4))
print("ctcvr", np.round(preds.ctcvr.data, 4))
for layer in trace.layers:
    sel = layer.selections[0]
    print(layer.name, "branch", sel.branch[:4], "specific", sel.specific[:4, 0], "shared", sel.shared[:4, 0])

# Selection is per instance: two records from the same scenario can route
# through different experts.

ids = data.test.scenario_ids
_, t = model.forward(data.test)
sp = t.layers[0].selections[0].specific[:, 0]
for s in range(4):
    print(schema.scenario_labels[s], np.bincount(sp[ids == s], minlength=6))

# ## Reduction to dense MMoE
#
# Selecting every expert as both specific and shared leaves the mask empty, so
# the layer becomes an ordinary multi-gate mixture.

full = ModelConfig.for_schema(schema, seed=0, k_specific_scenario=6, k_shared_scenario=6,
                              k_specific_task=6, k_shared_task=6)
a, b = build_model("aesm2", full), build_model("mmoe", full)
b.load_state(a.state())
pa, pb = a.predict(data.test), b.predict(data.test)
print("max |diff|:", max(np.max(np.abs(pa[k] - pb[k])) for k in pa))
