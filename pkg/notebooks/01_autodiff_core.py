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

# # The autodiff core
#
# Every model in the package runs on `aesm2.tensor`: float64 arrays with a
# recorded tape and hand-written backward rules. Shapes are explicit; the only
# broadcast allowed is adding a bias row.

import numpy as np

from aesm2 import tensor as T
from aesm2.tensor import Tensor

# A tiny logistic model, forward and backward.

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(5, 3)))
w = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
b = Tensor(np.zeros(1), requires_grad=True)
p = T.sigmoid(T.matmul(x, w) + b)
y = np.array([1, 0, 1, 1, 0])
loss = T.mean(T.reshape(-(T.log(p) * Tensor(y[:, None].astype(float))
                          + T.log(1.0 - p) * Tensor(1.0 - y[:, None])), (5,)))
loss.backward()
print("loss", float(loss.data))
print("dL/dw", w.grad.ravel())

# Compare with the closed form: for mean log-loss the gradient is X^T (p - y) / N.

closed = x.data.T @ (p.data - y[:, None]) / 5
print("closed form", closed.ravel())
print("max abs diff", np.max(np.abs(closed - w.grad)))

# ## Checking against finite differences
#
# `check_gradients` perturbs each coordinate by +/-eps and reports the worst
# relative error against the tape's gradient.

def loss_fn():
    p = T.sigmoid(T.matmul(x, w) + b)
    return T.sum_(T.mul(p, p))

print("worst relative error:", T.check_gradients(loss_fn, [w, b]))

# ## Masked softmax
#
# Inactive slots get a large negative fill before the softmax, so their weight
# comes out as exactly zero and never NaN.

logits = Tensor([[2.0, 1.0, 0.5]])
keep = np.array([[True, True, False]])
print(T.softmax(T.masked_fill(logits, keep, -1e9), axis=1).data)
