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

# # Synthetic multi-scenario data
#
# Four scenarios form a 2 x 2 hierarchy (channel HP/VP, domain RI/BS). Each
# scenario's click logit is linear in fixed ground-truth feature embeddings.
# Its weight vector mixes a channel direction, a domain direction and a
# scenario-own direction:
#
#     w_s = a * u_channel + b * u_domain + (1 - a - b) * u_own
#
# With a = b = 0 the scenarios have nothing in common; pushing the own weight to
# zero (plus a global direction) makes them identical.

import tempfile
from pathlib import Path

import numpy as np

from aesm2 import SyntheticSpec, generate_synthetic, load_csv, write_csv
from aesm2.evaluation import auc

spec = SyntheticSpec(n_train=100_000, n_val=0, n_test=20_000)
data = generate_synthetic(spec, seed=0)
ids = data.train.scenario_ids
for s, label in enumerate(data.train.schema.scenario_labels):
    rows = ids == s
    clicks = data.train.click[rows]
    print(f"{label:<6} share {rows.mean():.3f} (target {spec.shares[s]:.2f})  "
          f"ctr {clicks.mean():.3f} (target {spec.ctr_base[s]:.2f})  "
          f"cvr {data.train.conversion[rows].sum() / clicks.sum():.3f} (target {spec.cvr_base[s]:.2f})")

# How similar are the scenarios? The cosine between weight vectors follows
# directly from the mixing coefficients.

w = data.world.ctr_weights
print(np.round(w @ w.T, 3))

# The best possible AUC comes from scoring with the true probabilities.

pc, pv = data.world.probabilities(data.test, spec.signal)
print("oracle AUC  ctr %.4f  ctcvr %.4f" % (auc(pc, data.test.click), auc(pc * pv, data.test.conversion)))

# CSV round trip: scenario columns first, then features, then the two labels.

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "test.csv"
    write_csv(data.test, path)
    print(path.read_text().splitlines()[0])
    print("identical after reload:", load_csv(path, data.test.schema).same_as(data.test))
