"""Metrics and analyses: AUC tables, transfer matrices, expert utilization, KL curves."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .data import Dataset
from .errors import ContractError, LogFormatError, ShapeError, UndefinedMetric

TASKS = ("ctr", "ctcvr")
ALL = "ALL"


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counted half.

    Computed from the rank sum of the positives with average ranks for ties.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ShapeError(f"auc: {s.size} scores but {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise ContractError("auc: labels must be 0 or 1")
    if np.isnan(s).any():
        raise ContractError("auc: scores contain NaN")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric(f"auc needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s, method="average")
    # U is an integer or half-integer, so this is exact for any realistic size
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_or_none(scores, labels) -> float | None:
    try:
        return auc(scores, labels)
    except UndefinedMetric:
        return None


def _atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


# ---------------------------------------------------------------------------
# per-scenario AUC tables


@dataclass
class MetricReport:
    """AUC per ``(scenario, task)`` plus the pooled ``ALL`` column.

    ``None`` marks a cell whose labels are single-class; such cells are absent
    from every serialized form rather than filled in.
    """

    scenarios: list[str]
    tasks: list[str]
    auc: dict[tuple[str, str], float | None]
    counts: dict[tuple[str, str], tuple[int, int]]  # (instances, positives)

    def get(self, scenario: str, task: str) -> float | None:
        return self.auc[(scenario, task)]

    def merged(self, task: str) -> float | None:
        return self.auc[(ALL, task)]

    @property
    def columns(self) -> list[tuple[str, str]]:
        return [(s, t) for s in [*self.scenarios, ALL] for t in self.tasks]

    def to_records(self) -> list[dict]:
        out = []
        for s, t in self.columns:
            n, p = self.counts[(s, t)]
            rec = {"scenario": s, "task": t, "n": n, "positives": p}
            if self.auc[(s, t)] is not None:
                rec["auc"] = self.auc[(s, t)]
            out.append(rec)
        return out

    def to_text(self) -> str:
        """One ``key=value`` record per cell."""
        lines = []
        for rec in self.to_records():
            lines.append(" ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> MetricReport:
        scenarios, tasks, aucs, counts = [], [], {}, {}
        for ln, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = dict(kv.split("=", 1) for kv in line.split())
                key = (rec["scenario"], rec["task"])
                counts[key] = (int(rec["n"]), int(rec["positives"]))
            except (KeyError, ValueError) as exc:
                raise LogFormatError(f"line {ln}: malformed metric record {line!r}") from exc
            aucs[key] = float(rec["auc"]) if "auc" in rec else None
            if key[0] != ALL and key[0] not in scenarios:
                scenarios.append(key[0])
            if key[1] not in tasks:
                tasks.append(key[1])
        return cls(scenarios, tasks, aucs, counts)

    def header(self) -> list[str]:
        return [f"{s}/{t}" for s, t in self.columns]

    def row(self) -> list[str]:
        return [_fmt(self.auc[c]) for c in self.columns]

    def save(self, directory, name: str = "metrics"):
        directory = Path(directory)
        _atomic_write(directory / f"{name}.txt", self.to_text())
        _atomic_write(directory / f"{name}.csv", metric_table({name: self}))


def metric_table(reports: Mapping[str, MetricReport]) -> str:
    """CSV with one row per model/variant and one column per scenario x task."""
    reports = dict(reports)
    if not reports:
        raise ContractError("metric_table needs at least one report")
    first = next(iter(reports.values()))
    for name, rep in reports.items():
        if rep.columns != first.columns:
            raise ContractError(f"report {name!r} has a different column layout")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", *first.header()])
    for name, rep in reports.items():
        w.writerow([name, *rep.row()])
    return buf.getvalue()


def labels_for(dataset: Dataset, task: str) -> np.ndarray:
    if task == "ctr":
        return dataset.click
    if task == "ctcvr":
        return dataset.conversion
    raise ContractError(f"unknown task {task!r}")


def report_from_predictions(dataset: Dataset, preds: Mapping[str, np.ndarray], tasks=TASKS) -> MetricReport:
    """Build a report from precomputed head outputs (``ctr`` and ``ctcvr`` arrays)."""
    labels = dataset.schema.scenario_labels
    ids = dataset.scenario_ids
    aucs, counts = {}, {}
    for task in tasks:
        y = labels_for(dataset, task)
        scores = np.asarray(preds[task])
        if scores.shape != y.shape:
            raise ShapeError(f"{task} predictions have shape {scores.shape}, labels {y.shape}")
        for s, label in enumerate(labels):
            rows = ids == s
            aucs[(label, task)] = auc_or_none(scores[rows], y[rows])
            counts[(label, task)] = (int(rows.sum()), int(y[rows].sum()))
        aucs[(ALL, task)] = auc_or_none(scores, y)
        counts[(ALL, task)] = (int(y.size), int(y.sum()))
    return MetricReport(list(labels), list(tasks), aucs, counts)


def evaluate(model, dataset: Dataset, batch_size: int = 8192) -> MetricReport:
    """CTR AUC against clicks and CTCVR AUC against conversions, per scenario and pooled.

    The model runs in inference mode (no gate noise), so the result depends on
    the parameters and data only.
    """
    return report_from_predictions(dataset, model.predict(dataset, batch_size))


# ---------------------------------------------------------------------------
# cross-scenario transfer


@dataclass
class TransferMatrix:
    """``values[task][i, j]``: AUC of the model trained on scenario ``i``, tested on ``j``."""

    scenarios: list[str]
    values: dict[str, np.ndarray]

    def diagonal_margin(self, task: str) -> np.ndarray:
        """Per row: diagonal entry minus the best off-diagonal entry."""
        m = self.values[task]
        off = m.copy()
        np.fill_diagonal(off, -np.inf)
        return np.diag(m) - np.nanmax(off, axis=1)

    def spread(self, task: str) -> float:
        m = self.values[task]
        return float(np.nanmax(m) - np.nanmin(m))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "train_scenario", *self.scenarios])
        for task, m in self.values.items():
            for i, s in enumerate(self.scenarios):
                w.writerow([task, s, *(_fmt(None if math.isnan(v) else float(v)) for v in m[i])])
        return buf.getvalue()


def transfer_matrix(models: Sequence, datasets: Sequence[Dataset], tasks=TASKS, scenarios=None) -> TransferMatrix:
    """Evaluate every single-scenario model on every scenario's test set.

    ``models[i]`` was trained on scenario ``i`` only; ``datasets[j]`` holds the
    test instances of scenario ``j``. Undefined cells are NaN.
    """
    if len(models) != len(datasets):
        raise ContractError(f"{len(models)} models for {len(datasets)} scenario datasets")
    if not models:
        raise ContractError("transfer_matrix needs at least one scenario")
    n = len(models)
    values = {t: np.full((n, n), np.nan) for t in tasks}
    for i, model in enumerate(models):
        for j, ds in enumerate(datasets):
            preds = model.predict(ds)
            for t in tasks:
                v = auc_or_none(preds[t], labels_for(ds, t))
                if v is not None:
                    values[t][i, j] = v
    if scenarios is None:
        scenarios = [f"S{i}" for i in range(n)]
    return TransferMatrix(list(scenarios), values)


# ---------------------------------------------------------------------------
# expert utilization


@dataclass
class UtilizationReport:
    """Selection frequencies per layer, group and expert.

    ``specific[layer][g]`` is a length-``n`` vector: the fraction of the
    group's instances whose specific set contained each expert. A group is a
    gate branch (``by="branch"``) or a full scenario path (``by="scenario"``).
    """

    by: str
    groups: dict[str, list[str]]
    specific: dict[str, dict[str, np.ndarray]]
    shared: dict[str, dict[str, np.ndarray]]
    counts: dict[str, dict[str, int]]

    def records(self) -> Iterable[tuple[str, str, int, float, float]]:
        for layer, groups in self.groups.items():
            for g in groups:
                for e, (fs, fh) in enumerate(zip(self.specific[layer][g], self.shared[layer][g])):
                    yield layer, g, e, float(fs), float(fh)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", self.by, "expert", "specific_freq", "shared_freq"])
        for layer, g, e, fs, fh in self.records():
            w.writerow([layer, g, e, f"{fs:.6f}", f"{fh:.6f}"])
        return buf.getvalue()

    def vector(self, layer: str, group: str) -> np.ndarray:
        """Specific and shared frequencies concatenated, for distance comparisons."""
        return np.concatenate([self.specific[layer][group], self.shared[layer][group]])


def utilization(model, dataset: Dataset, by: str = "branch", batch_size: int = 8192) -> UtilizationReport:
    """Count how often each expert lands in the specific and shared sets, without noise."""
    if by not in ("branch", "scenario"):
        raise ContractError(f"utilization: by must be 'branch' or 'scenario', got {by!r}")
    if len(dataset) == 0:
        raise ContractError("utilization needs a non-empty dataset")
    schema = dataset.schema
    sums_sp: dict[str, dict[str, np.ndarray]] = {}
    sums_sh: dict[str, dict[str, np.ndarray]] = {}
    counts: dict[str, dict[str, int]] = {}
    group_order: dict[str, list[str]] = {}
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = dataset.take(slice(start, start + batch_size))
            _, trace = model.forward(batch)
            if not trace.layers or trace.layers[0].selections[0].specific is None:
                raise ContractError(f"{model.kind} has no discrete expert selection to count")
            for layer in trace.layers:
                n = layer.gating.n_experts
                branch_names = _branch_names(schema, layer)
                for sel in layer.selections:
                    if by == "branch":
                        lname, keys, labels = layer.name, np.asarray(sel.branch), branch_names
                    else:
                        # task layers route each task separately; keep them apart
                        lname = layer.name if layer.kind == "scenario" else f"{layer.name}.{branch_names[sel.branch[0]]}"
                        keys, labels = batch.scenario_ids, list(schema.scenario_labels)
                    group_order.setdefault(lname, labels)
                    for gid in np.unique(keys):
                        rows = keys == gid
                        g = labels[gid]
                        sp = sums_sp.setdefault(lname, {}).setdefault(g, np.zeros(n))
                        sh = sums_sh.setdefault(lname, {}).setdefault(g, np.zeros(n))
                        sp += np.bincount(sel.specific[rows].ravel(), minlength=n)
                        sh += np.bincount(sel.shared[rows].ravel(), minlength=n)
                        counts.setdefault(lname, {}).setdefault(g, 0)
                        counts[lname][g] += int(rows.sum())
    groups = {l: [g for g in group_order[l] if g in counts[l]] for l in group_order}
    spec = {l: {g: sums_sp[l][g] / counts[l][g] for g in groups[l]} for l in groups}
    shar = {l: {g: sums_sh[l][g] / counts[l][g] for g in groups[l]} for l in groups}
    return UtilizationReport(by, groups, spec, shar, {l: dict(counts[l]) for l in groups})


def _branch_names(schema, layer) -> list[str]:
    if layer.kind == "scenario":
        return list(schema.levels[layer.index].branches)
    return list(schema.tasks)


# ---------------------------------------------------------------------------
# KL curves from the step log

KL_FIELDS = ("kl_specific_scenario", "kl_specific_task", "kl_shared_scenario", "kl_shared_task")


@dataclass
class KLCurves:
    step: np.ndarray
    epoch: np.ndarray
    columns: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.step)

    @property
    def scenario(self) -> np.ndarray:
        """Specific + shared KL summed over scenario layers."""
        return self.columns["kl_specific_scenario"] + self.columns["kl_shared_scenario"]

    @property
    def task(self) -> np.ndarray:
        return self.columns["kl_specific_task"] + self.columns["kl_shared_task"]

    @property
    def total(self) -> np.ndarray:
        return self.scenario + self.task

    def epoch_mean(self, epoch: int | None = None) -> float:
        """Mean total KL over one epoch's steps (default: the last logged epoch)."""
        if len(self) == 0:
            raise LogFormatError("KL log is empty")
        if epoch is None:
            epoch = int(self.epoch.max())
        rows = self.epoch == epoch
        if not rows.any():
            raise LogFormatError(f"no steps logged for epoch {epoch}")
        return float(self.total[rows].mean())

    def to_csv(self, smooth_alpha: float | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        sp = self.columns["kl_specific_scenario"] + self.columns["kl_specific_task"]
        sh = self.columns["kl_shared_scenario"] + self.columns["kl_shared_task"]
        if smooth_alpha is not None:
            sp, sh = ema(sp, smooth_alpha), ema(sh, smooth_alpha)
        w.writerow(["step", "kl_specific", "kl_shared", *KL_FIELDS])
        for i in range(len(self)):
            w.writerow(
                [int(self.step[i]), f"{sp[i]:.8g}", f"{sh[i]:.8g}", *(f"{self.columns[k][i]:.8g}" for k in KL_FIELDS)]
            )
        return buf.getvalue()


def _read_records(run_log) -> list[dict]:
    if isinstance(run_log, (str, os.PathLike)):
        path = Path(run_log)
        if path.is_dir():
            path = path / "steps.log"
        if not path.exists():
            raise LogFormatError(f"step log {path} does not exist")
        records = []
        with open(path, encoding="utf-8") as fh:
            for ln, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise LogFormatError(f"{path}: line {ln} is not valid JSON") from exc
        return records
    return list(run_log)


def kl_curves(run_log) -> KLCurves:
    """Per-step KL sums from a run log (a ``steps.log`` path, run directory, or record list)."""
    records = _read_records(run_log)
    need = ("step", "epoch", *KL_FIELDS)
    cols = {k: [] for k in need}
    for i, rec in enumerate(records):
        if not isinstance(rec, Mapping):
            raise LogFormatError(f"record {i} is not a mapping")
        missing = [k for k in need if k not in rec]
        if missing:
            raise LogFormatError(f"record {i} lacks fields {missing}")
        for k in need:
            cols[k].append(rec[k])
    return KLCurves(
        step=np.asarray(cols["step"], dtype=np.int64),
        epoch=np.asarray(cols["epoch"], dtype=np.int64),
        columns={k: np.asarray(cols[k], dtype=np.float64) for k in KL_FIELDS},
    )


def ema(values, alpha: float = 0.1) -> np.ndarray:
    """Exponential moving average; output has the same length as the input."""
    if not 0 < alpha <= 1:
        raise ContractError("ema: alpha must lie in (0, 1]")
    v = np.asarray(values, dtype=np.float64)
    out = np.empty_like(v)
    acc = None
    for i, x in enumerate(v):
        acc = x if acc is None else alpha * x + (1 - alpha) * acc
        out[i] = acc
    return out


def running_min(values) -> np.ndarray:
    """Monotone non-increasing envelope of a curve, same length."""
    v = np.asarray(values, dtype=np.float64)
    return np.minimum.accumulate(v) if v.size else v.copy()
