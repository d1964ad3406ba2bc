"""Training objective: per-task cross-entropy, selection auxiliary losses, L2, Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError
from .model import ForwardTrace, ModelConfig, Predictions
from .tensor import Tensor

PRED_CLAMP = 1e-12


def _check_labels(labels: np.ndarray):
    if np.any((labels != 0) & (labels != 1)):
        raise DataError("labels must be 0 or 1")


def bce(pred: Tensor, labels) -> Tensor:
    """Elementwise ``-y ln p - (1 - y) ln(1 - p)`` with ``p`` clamped away from 0 and 1."""
    y = np.asarray(labels, dtype=np.float64)
    _check_labels(y)
    if y.shape != pred.shape:
        raise ContractError(f"labels {y.shape} do not match predictions {pred.shape}")
    p = T.clamp(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    return -(T.mul(T.log(p), Tensor(y)) + T.mul(T.log(1.0 - p), Tensor(1.0 - y)))


def bce_loss(pred: float, label: int) -> float:
    """Scalar cross-entropy for one prediction."""
    if label not in (0, 1):
        raise DataError(f"label {label!r} is not 0 or 1")
    p = min(max(float(pred), PRED_CLAMP), 1.0 - PRED_CLAMP)
    return -math.log(p) if label == 1 else -math.log(1.0 - p)


def _check_layers(trace: ForwardTrace, n_scenario_layers, n_task_layers):
    if n_scenario_layers is not None and len(trace.of_kind("scenario")) != n_scenario_layers:
        raise ContractError(
            f"trace has {len(trace.of_kind('scenario'))} scenario layers, expected {n_scenario_layers}"
        )
    if n_task_layers is not None and len(trace.of_kind("task")) != n_task_layers:
        raise ContractError(f"trace has {len(trace.of_kind('task'))} task layers, expected {n_task_layers}")


def _zero() -> Tensor:
    return Tensor(0.0)


def aux_specific_loss(
    trace: ForwardTrace, n_scenario_layers: int | None = None, n_task_layers: int | None = None
) -> dict[str, Tensor]:
    """Batch-mean of ``sum_layers sum_{k in E_sp} KL(p_j || G~[k, :])``, split by layer kind.

    With a one-hot reference the divergence is ``-log G~[k, j]``, read off the
    log-softmax so gradients reach the gate parameters.
    """
    _check_layers(trace, n_scenario_layers, n_task_layers)
    parts = {"scenario": _zero(), "task": _zero()}
    for layer in trace.layers:
        logg = layer.gating.log_normalized
        B = logg.shape[0]
        for sel in layer.selections:
            if sel.specific is None:
                continue
            K = sel.specific.shape[1]
            rows = np.repeat(np.arange(B), K)
            cols = np.repeat(sel.branch, K)
            picked = T.take(logg, (rows, sel.specific.ravel(), cols))
            parts[layer.kind] = parts[layer.kind] + T.sum_(picked) * (-1.0 / B)
    return parts


def aux_shared_loss(
    trace: ForwardTrace, n_scenario_layers: int | None = None, n_task_layers: int | None = None
) -> dict[str, Tensor]:
    """Batch-mean of ``sum_layers sum_{k in E_sh} KL(uniform || G~[k, :])``."""
    _check_layers(trace, n_scenario_layers, n_task_layers)
    parts = {"scenario": _zero(), "task": _zero()}
    for layer in trace.layers:
        logg = layer.gating.log_normalized
        B, _, m = logg.shape
        for sel in layer.selections:
            if sel.shared is None:
                continue
            K = sel.shared.shape[1]
            rows = T.take(logg, (np.repeat(np.arange(B), K), sel.shared.ravel()))
            # KL(q || r) = -ln m - (1/m) sum_i ln r_i, per selected row
            kl_sum = T.sum_(rows) * (-1.0 / m) + (-math.log(m) * B * K)
            parts[layer.kind] = parts[layer.kind] + kl_sum * (1.0 / B)
    return parts


@dataclass
class LossBreakdown:
    per_task: list[float]
    aux_specific: float
    aux_shared: float
    l2: float
    total: float
    kl_specific_scenario: float = 0.0
    kl_specific_task: float = 0.0
    kl_shared_scenario: float = 0.0
    kl_shared_task: float = 0.0
    tensor: Tensor | None = field(default=None, repr=False)

    def recombine(self, cfg: ModelConfig) -> float:
        return (
            sum(w * l for w, l in zip(cfg.lambda_tasks, self.per_task))
            + cfg.lambda_specific * self.aux_specific
            + cfg.lambda_shared * self.aux_shared
            + cfg.l2 * self.l2
        )

    def as_record(self, task_names: Sequence[str] = ("ctr", "ctcvr")) -> dict[str, float]:
        rec = {f"loss_{name}": v for name, v in zip(task_names, self.per_task)}
        rec.update(
            aux_specific=self.aux_specific,
            aux_shared=self.aux_shared,
            kl_specific_scenario=self.kl_specific_scenario,
            kl_specific_task=self.kl_specific_task,
            kl_shared_scenario=self.kl_shared_scenario,
            kl_shared_task=self.kl_shared_task,
            l2=self.l2,
            total=self.total,
        )
        return rec


def total_loss(
    preds: Predictions,
    batch,
    trace: ForwardTrace,
    cfg: ModelConfig,
    weights: Sequence[Tensor] = (),
) -> LossBreakdown:
    """Weighted task losses + auxiliary selection losses + L2 over ``weights``.

    Supervision is on CTR (click labels) and CTCVR (conversion labels); the
    CVR head is only trained through the CTCVR product.
    """
    labels = [batch.click, batch.conversion]
    task_losses = [T.mean(bce(head, y)) for head, y in zip(preds.heads(), labels)]
    sp = aux_specific_loss(trace)
    sh = aux_shared_loss(trace)
    aux_sp = sp["scenario"] + sp["task"]
    aux_sh = sh["scenario"] + sh["task"]
    l2 = T.squared_norm(weights) if weights else _zero()

    total = _zero()
    for w, l in zip(cfg.lambda_tasks, task_losses):
        if w:
            total = total + l * w
    if cfg.lambda_specific:
        total = total + aux_sp * cfg.lambda_specific
    if cfg.lambda_shared:
        total = total + aux_sh * cfg.lambda_shared
    if cfg.l2:
        total = total + l2 * cfg.l2
    return LossBreakdown(
        per_task=[float(l.data) for l in task_losses],
        aux_specific=float(aux_sp.data),
        aux_shared=float(aux_sh.data),
        l2=float(l2.data),
        total=float(total.data),
        kl_specific_scenario=float(sp["scenario"].data),
        kl_specific_task=float(sp["task"].data),
        kl_shared_scenario=float(sh["scenario"].data),
        kl_shared_task=float(sh["task"].data),
        tensor=total,
    )


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters whose gradient is ``None`` are skipped entirely.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
