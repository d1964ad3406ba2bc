"""Mini-batch training with Adam, per-step loss logging and early stopping."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, batch_iter
from .errors import ConfigError, ContractError, TrainingDiverged, UndefinedMetric
from .evaluation import MetricReport, evaluate
from .model import BaseModel, ModelConfig, build_model
from .objective import AdamState, LossBreakdown, adam_step, total_loss

StepCallback = Callable[..., None]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    patience: int = 3
    seed: int = 0
    # cap on optimizer steps per epoch; None means a full pass
    max_steps_per_epoch: int | None = None

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_steps_per_epoch is not None and self.max_steps_per_epoch < 1:
            raise ConfigError("max_steps_per_epoch must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    train_loss: float
    val_auc_ctr: float | None
    val_auc_ctcvr: float | None
    improved: bool
    seconds: float


@dataclass
class TrainResult:
    model: BaseModel
    epochs: list[EpochRecord]
    steps: list[dict] = field(repr=False)
    best_epoch: int
    best_val_auc: float | None
    val_report: MetricReport | None
    stopped_early: bool

    @property
    def n_steps(self) -> int:
        return len(self.steps)


def _streams(seed: int):
    shuffle_seq, noise_seq = np.random.SeedSequence([seed, 2]).spawn(2)
    return shuffle_seq, np.random.default_rng(noise_seq)


def _merged(report: MetricReport | None, task: str) -> float | None:
    return None if report is None else report.merged(task)


def train(
    model: BaseModel,
    train_set: Dataset,
    val_set: Dataset | None = None,
    cfg: TrainConfig | None = None,
    run_dir=None,
    callback: StepCallback | None = None,
) -> TrainResult:
    """Train ``model`` in place and return the history.

    Each epoch ends with a validation pass; the merged CTR AUC picks the best
    epoch and stops training after ``patience`` epochs without improvement.
    The best parameters are restored before returning. ``callback`` is called
    after every step as ``callback(step=, epoch=, batch=, preds=, trace=,
    loss=)``. With ``run_dir`` set, ``steps.log`` (JSON lines) and
    ``metrics.csv`` are written there.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if len(train_set) == 0:
        raise ContractError("cannot train on an empty dataset")
    shuffle_seq, noise_rng = _streams(cfg.seed)
    epoch_seeds = shuffle_seq.generate_state(cfg.epochs)
    adam = AdamState(lr=cfg.lr)
    weights = [model.params[n] for n in model.weight_names]
    values = {k: v.data for k, v in model.params.items()}

    steps: list[dict] = []
    epochs: list[EpochRecord] = []
    best_auc, best_epoch, best_state, best_report = -math.inf, 0, model.state(), None
    bad_epochs, stopped = 0, False
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for i, batch in enumerate(batch_iter(train_set, cfg.batch_size, int(epoch_seeds[epoch - 1]))):
            if cfg.max_steps_per_epoch is not None and i >= cfg.max_steps_per_epoch:
                break
            step += 1
            preds, trace = model.forward(batch, training=True, rng=noise_rng)
            loss: LossBreakdown = total_loss(preds, batch, trace, model.config, weights)
            if not math.isfinite(loss.total):
                raise TrainingDiverged(step, loss.total)
            model.zero_grad()
            loss.tensor.backward()
            adam_step(values, {k: v.grad for k, v in model.params.items()}, adam)
            rec = {"step": step, "epoch": epoch, **loss.as_record()}
            steps.append(rec)
            losses.append(loss.total)
            if callback is not None:
                callback(step=step, epoch=epoch, batch=batch, preds=preds, trace=trace, loss=loss)

        report = _safe_evaluate(model, val_set)
        val_ctr = _merged(report, "ctr")
        improved = val_ctr is not None and val_ctr > best_auc
        if improved or (val_ctr is None and epoch == cfg.epochs):
            best_auc = val_ctr if val_ctr is not None else best_auc
            best_epoch, best_state, best_report = epoch, model.state(), report
            bad_epochs = 0
        else:
            bad_epochs += 1
        epochs.append(
            EpochRecord(
                epoch, len(losses), float(np.mean(losses)), val_ctr, _merged(report, "ctcvr"), improved,
                time.perf_counter() - t0,
            )
        )
        if val_set is not None and bad_epochs >= cfg.patience:
            stopped = True
            break

    if val_set is not None and best_epoch:
        model.load_state(best_state)
    result = TrainResult(
        model=model,
        epochs=epochs,
        steps=steps,
        best_epoch=best_epoch or len(epochs),
        best_val_auc=None if best_auc == -math.inf else best_auc,
        val_report=best_report,
        stopped_early=stopped,
    )
    if run_dir is not None:
        write_logs(result, run_dir)
    return result


def _safe_evaluate(model, val_set) -> MetricReport | None:
    if val_set is None or len(val_set) == 0:
        return None
    try:
        return evaluate(model, val_set)
    except UndefinedMetric:
        return None


def write_logs(result: TrainResult, run_dir) -> None:
    """``steps.log`` and ``metrics.csv``, each replaced atomically."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tmp = run_dir / "steps.log.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in result.steps:
            fh.write(json.dumps(rec) + "\n")
    os.replace(tmp, run_dir / "steps.log")
    tmp = run_dir / "metrics.csv.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "steps", "train_loss", "val_auc_ctr", "val_auc_ctcvr", "best"])
        for e in result.epochs:
            w.writerow(
                [
                    e.epoch,
                    e.steps,
                    f"{e.train_loss:.8f}",
                    "" if e.val_auc_ctr is None else f"{e.val_auc_ctr:.8f}",
                    "" if e.val_auc_ctcvr is None else f"{e.val_auc_ctcvr:.8f}",
                    int(e.epoch == result.best_epoch),
                ]
            )
    os.replace(tmp, run_dir / "metrics.csv")


def fit(kind: str, model_cfg: ModelConfig, train_set: Dataset, val_set: Dataset | None, cfg: TrainConfig, **kw):
    """Build a fresh model of ``kind`` and train it."""
    return train(build_model(kind, model_cfg), train_set, val_set, cfg, **kw)


class SingleScenarioModel:
    """A model trained on one scenario, applied to any scenario's instances.

    It never saw another scenario path, so every instance is scored as if it
    came from the training scenario; feeding other paths would only read
    untrained scenario embeddings.
    """

    def __init__(self, model: BaseModel, path):
        self.model = model
        self.path = np.asarray(path, dtype=np.int64)

    @property
    def kind(self) -> str:
        return self.model.kind

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def pinned(self, dataset: Dataset) -> Dataset:
        paths = np.broadcast_to(self.path, dataset.scenarios.shape)
        return Dataset(dataset.schema, paths, dataset.features, dataset.click, dataset.conversion)

    def predict(self, dataset: Dataset, batch_size: int = 8192) -> dict[str, np.ndarray]:
        return self.model.predict(self.pinned(dataset), batch_size)


def train_per_scenario(
    kind: str, model_cfg: ModelConfig, train_set: Dataset, val_set: Dataset | None, cfg: TrainConfig
) -> list[SingleScenarioModel]:
    """One model per scenario, each trained only on that scenario's instances."""
    val_parts = val_set.by_scenario() if val_set is not None else {}
    paths = train_set.schema.scenario_paths()
    models = []
    for s, (label, part) in enumerate(train_set.by_scenario().items()):
        if len(part) == 0:
            raise ContractError(f"scenario {label} has no training data")
        models.append(SingleScenarioModel(fit(kind, model_cfg, part, val_parts.get(label), cfg).model, paths[s]))
    return models


def selected_kl_sum(steps: Sequence[dict], epoch: int | None = None) -> float:
    """Mean over an epoch's steps of the summed KL of all selected experts."""
    if not steps:
        raise ContractError("no steps logged")
    if epoch is None:
        epoch = max(r["epoch"] for r in steps)
    vals = [
        r["kl_specific_scenario"] + r["kl_specific_task"] + r["kl_shared_scenario"] + r["kl_shared_task"]
        for r in steps
        if r["epoch"] == epoch
    ]
    if not vals:
        raise ContractError(f"no steps logged for epoch {epoch}")
    return float(np.mean(vals))
