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

# # Picking experts by KL distance
#
# A layer with `n` experts and `m` branches computes one gate per branch. Stack
# the gate logits into an `n x m` matrix and softmax each row: row `k` says how
# strongly expert `k` leans toward each branch.
#
# For branch `j`:
#
# * specific experts are the rows closest to the one-hot vector at `j`
# * shared experts are the rows closest to uniform

import numpy as np

from aesm2 import tensor as T
from aesm2.selection import GatingMatrix, active_mask, mask_gate, select_experts
from aesm2.tensor import Tensor

G = np.array([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]])
for j in range(2):
    r = select_experts(G, j, 1, 1)
    print(f"branch {j}: specific {r.specific}  shared {r.shared}  "
          f"KL to one-hot {np.round(-r.specific_scores, 3)}  KL to uniform {np.round(-r.shared_scores, 3)}")

# Expert 0 belongs to branch 0, expert 2 to branch 1, and expert 1 sits exactly
# in the middle, so both branches share it.
#
# With a one-hot reference the KL reduces to `-log G[k, j]`, so the specific
# set is just the top of column `j`:

print(np.argsort(-G[:, 1], kind="stable")[:1])

# ## From raw gate logits
#
# In the model the matrix comes from per-branch gate outputs. Adding a constant
# to one expert's logits across all branches changes nothing: the row softmax
# cancels it.

rng = np.random.default_rng(3)
raw = rng.normal(size=(6, 3))
g1 = GatingMatrix.from_logits([Tensor(raw[:, j][None]) for j in range(3)]).normalized.data[0]
raw[2] += 5.0
g2 = GatingMatrix.from_logits([Tensor(raw[:, j][None]) for j in range(3)]).normalized.data[0]
print("max change after shifting row 2:", np.max(np.abs(g1 - g2)))

# ## Masking
#
# Only the union of the two sets keeps weight in the branch's mixture.

r = select_experts(g1, 1, 2, 1)
keep = active_mask(6, np.array([r.specific]), np.array([r.shared]))
gate = Tensor(rng.normal(size=(1, 6)))
w = T.softmax(mask_gate(gate, keep), axis=1).data[0]
print("active", r.active, "weights", np.round(w, 3))
