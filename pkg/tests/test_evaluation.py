import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aesm2.data import SyntheticSpec, generate_synthetic
from aesm2.errors import ContractError, LogFormatError, ShapeError, UndefinedMetric
from aesm2.evaluation import (
    ALL,
    MetricReport,
    auc,
    ema,
    evaluate,
    kl_curves,
    metric_table,
    report_from_predictions,
    running_min,
    transfer_matrix,
    utilization,
)
from aesm2.model import ModelConfig, build_model

from conftest import random_dataset


def pair_count_auc(scores, labels):
    """O(P*N) pair counting in exact rational arithmetic."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = Fraction(0)
    for p in pos:
        for q in neg:
            wins += 1 if p > q else Fraction(1, 2) if p == q else 0
    return wins / (len(pos) * len(neg))


# -- auc --------------------------------------------------------------------------


def test_auc_worked_example():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_perfect_and_all_ties():
    assert auc([0.1, 0.2, 0.3, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_auc_single_class_is_undefined():
    with pytest.raises(UndefinedMetric):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetric):
        auc([], [])


def test_auc_bad_input():
    with pytest.raises(ShapeError):
        auc([0.1, 0.2], [1])
    with pytest.raises(ContractError):
        auc([0.1, 0.2], [1, 2])
    with pytest.raises(ContractError):
        auc([np.nan, 0.2], [1, 0])


def test_auc_matches_pair_counting_exactly():
    rng = np.random.default_rng(99)
    done = 0
    while done < 1000:
        n = int(rng.integers(2, 201))
        # coarse grids force many ties
        grid = int(rng.choice([2, 5, 20, 10**6]))
        scores = rng.integers(0, grid, size=n) / grid
        labels = (rng.random(n) < rng.uniform(0.05, 0.95)).astype(int)
        if labels.min() == labels.max():
            continue
        assert auc(scores, labels) == float(pair_count_auc(scores.tolist(), labels.tolist()))
        done += 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["exp", "cube", "affine", "sigmoid"]))
def test_auc_invariant_under_increasing_transforms(seed, kind):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 120))
    s = np.round(rng.normal(size=n), 1)
    y = np.r_[0, 1, (rng.random(n - 2) < 0.4).astype(int)]
    f = {
        "exp": np.exp,
        "cube": lambda v: v**3,
        "affine": lambda v: 3.0 * v - 7.0,
        "sigmoid": lambda v: 1 / (1 + np.exp(-v)),
    }[kind]
    assert auc(f(s), y) == auc(s, y)


# -- reports ----------------------------------------------------------------------


def _report(schema, seed=0):
    ds = random_dataset(schema, 400, seed=seed)
    rng = np.random.default_rng(seed)
    preds = {"ctr": rng.random(len(ds)), "ctcvr": rng.random(len(ds))}
    return ds, report_from_predictions(ds, preds)


def test_report_cells_and_pooled_column(schema):
    ds, rep = _report(schema)
    assert rep.columns[-2:] == [(ALL, "ctr"), (ALL, "ctcvr")]
    assert len(rep.columns) == 10
    for (s, t), v in rep.auc.items():
        assert v is None or 0 <= v <= 1
    assert rep.counts[(ALL, "ctr")] == (400, int(ds.click.sum()))


def test_single_class_cell_is_absent_not_half(schema):
    ds = random_dataset(schema, 200, seed=1)
    # no conversions anywhere in scenario 0
    ids = ds.scenario_ids
    conv = ds.conversion.copy()
    conv[ids == 0] = 0
    ds = type(ds)(schema, ds.scenarios, ds.features, ds.click, conv)
    rep = report_from_predictions(ds, {"ctr": np.linspace(0, 1, 200), "ctcvr": np.linspace(0, 1, 200)})
    label = schema.scenario_labels[0]
    assert rep.get(label, "ctcvr") is None
    assert "auc" not in [r for r in rep.to_records() if r["scenario"] == label and r["task"] == "ctcvr"][0]
    assert rep.row()[1] == ""


def test_report_text_round_trip(schema):
    _, rep = _report(schema)
    back = MetricReport.from_text(rep.to_text())
    assert back.scenarios == rep.scenarios and back.tasks == rep.tasks
    assert back.counts == rep.counts
    for k, v in rep.auc.items():
        assert back.auc[k] == pytest.approx(v, abs=5e-7)


def test_report_text_rejects_garbage():
    with pytest.raises(LogFormatError, match="line 1"):
        MetricReport.from_text("scenario=A task\n")


def test_metric_table_layout(schema, tmp_path):
    _, a = _report(schema, 0)
    _, b = _report(schema, 1)
    text = metric_table({"aesm2": a, "mmoe": b})
    lines = text.strip().splitlines()
    assert lines[0].split(",")[:3] == ["model", "HP&RI/ctr", "HP&RI/ctcvr"]
    assert [ln.split(",")[0] for ln in lines[1:]] == ["aesm2", "mmoe"]
    a.save(tmp_path, "m")
    assert (tmp_path / "m.txt").exists() and (tmp_path / "m.csv").read_text().startswith("model,")


def test_evaluate_is_deterministic(schema):
    model = build_model("aesm2", ModelConfig.for_schema(schema, seed=1))
    ds = random_dataset(schema, 300, seed=2)
    assert evaluate(model, ds).auc == evaluate(model, ds).auc


@pytest.mark.slow
def test_untrained_model_is_at_chance():
    # one untrained net is a fixed random function of the ids, so single seeds
    # scatter around 0.5; the per-cell mean over seeds is what sits at chance
    spec = SyntheticSpec(n_train=0, n_val=0, n_test=20_000)
    cells = []
    for seed in range(5):
        data = generate_synthetic(spec, seed=seed)
        model = build_model("aesm2", ModelConfig.for_schema(data.test.schema, seed=seed))
        rep = evaluate(model, data.test)
        cells.append([rep.auc[c] for c in rep.columns])
    mean = np.mean(cells, axis=0)
    assert np.all((mean >= 0.45) & (mean <= 0.55)), mean


# -- transfer matrix ------------------------------------------------------------------


class _Const:
    """Scores one feature column; lets the matrix be checked without training."""

    def __init__(self, col, sign):
        self.col, self.sign = col, sign

    def predict(self, ds):
        s = self.sign * ds.features[:, self.col].astype(float)
        return {"ctr": s, "ctcvr": s}


def test_transfer_matrix_shape_and_entries(schema):
    parts = list(random_dataset(schema, 400, seed=3).by_scenario().values())
    models = [_Const(0, 1.0), _Const(0, -1.0), _Const(1, 1.0), _Const(2, 1.0)]
    tm = transfer_matrix(models, parts, scenarios=schema.scenario_labels)
    assert tm.values["ctr"].shape == (4, 4)
    np.testing.assert_allclose(tm.values["ctr"][0] + tm.values["ctr"][1], 1.0, atol=1e-12)
    assert tm.to_csv().splitlines()[0] == "task,train_scenario,HP&RI,HP&BS,VP&RI,VP&BS"
    margin = tm.diagonal_margin("ctr")
    m = tm.values["ctr"]
    assert margin[0] == pytest.approx(m[0, 0] - max(m[0, 1:]))


def test_transfer_matrix_count_mismatch(schema):
    with pytest.raises(ContractError):
        transfer_matrix([_Const(0, 1.0)], [])


# -- utilization ----------------------------------------------------------------------


def test_utilization_normalizes_to_k(schema):
    cfg = ModelConfig.for_schema(schema, seed=4, k_specific_scenario=2, k_shared_task=3)
    model = build_model("aesm2", cfg)
    ds = random_dataset(schema, 500, seed=4)
    rep = utilization(model, ds)
    for layer, groups in rep.groups.items():
        k_sp = 2 if layer.startswith("scenario") else 1
        k_sh = 1 if layer.startswith("scenario") else 3
        for g in groups:
            assert rep.specific[layer][g].sum() == pytest.approx(k_sp, abs=1e-12)
            assert rep.shared[layer][g].sum() == pytest.approx(k_sh, abs=1e-12)
            assert np.all((rep.specific[layer][g] >= 0) & (rep.specific[layer][g] <= 1))
    by_s = utilization(model, ds, by="scenario")
    assert set(by_s.groups) == {"scenario.0", "scenario.1", "task.0.ctr", "task.0.ctcvr", "task.1.ctr", "task.1.ctcvr"}
    assert by_s.groups["scenario.0"] == schema.scenario_labels


def test_utilization_uniform_gates_pick_expert_zero(schema):
    model = build_model("aesm2", ModelConfig.for_schema(schema, seed=0))
    for name, t in model.params.items():
        if ".gate." in name:
            t.data[...] = 0.0
    rep = utilization(model, random_dataset(schema, 100))
    for layer, groups in rep.groups.items():
        for g in groups:
            assert rep.specific[layer][g][0] == 1.0 and rep.shared[layer][g][0] == 1.0
    lines = rep.to_csv().splitlines()
    assert lines[0] == "layer,branch,expert,specific_freq,shared_freq"
    assert lines[1] == "scenario.0,HP,0,1.000000,1.000000"


def test_utilization_rejects_empty_and_dense(schema):
    model = build_model("aesm2", ModelConfig.for_schema(schema))
    with pytest.raises(ContractError):
        utilization(model, random_dataset(schema, 0))
    with pytest.raises(ContractError):
        utilization(build_model("mmoe", ModelConfig.for_schema(schema)), random_dataset(schema, 10))


# -- KL curves ------------------------------------------------------------------------


def _records(n, epochs=2):
    rng = np.random.default_rng(0)
    return [
        {
            "step": i + 1,
            "epoch": 1 + i * epochs // n,
            "kl_specific_scenario": float(rng.random()),
            "kl_specific_task": float(rng.random()),
            "kl_shared_scenario": float(rng.random()),
            "kl_shared_task": float(rng.random()),
        }
        for i in range(n)
    ]


def test_kl_curves_from_records_and_file(tmp_path):
    recs = _records(10)
    (tmp_path / "steps.log").write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    a, b = kl_curves(recs), kl_curves(tmp_path)
    assert len(a) == len(b) == 10
    np.testing.assert_array_equal(a.total, b.total)
    expected = np.mean([sum(v for k, v in r.items() if k.startswith("kl_")) for r in recs[5:]])
    assert a.epoch_mean() == pytest.approx(expected, rel=1e-12)
    csv_lines = a.to_csv(smooth_alpha=0.2).splitlines()
    assert len(csv_lines) == 11 and csv_lines[0].startswith("step,kl_specific,kl_shared")


def test_kl_curves_missing_fields():
    recs = _records(3)
    del recs[1]["kl_shared_task"]
    with pytest.raises(LogFormatError, match="record 1"):
        kl_curves(recs)


def test_kl_curves_bad_files(tmp_path):
    with pytest.raises(LogFormatError):
        kl_curves(tmp_path / "nope.log")
    (tmp_path / "steps.log").write_text("{not json\n")
    with pytest.raises(LogFormatError, match="line 1"):
        kl_curves(tmp_path)


def test_smoothing_keeps_length():
    v = np.random.default_rng(0).random(37)
    assert len(ema(v, 0.3)) == 37
    r = running_min(v)
    assert len(r) == 37 and np.all(np.diff(r) <= 0)
    assert ema(v, 1.0).tolist() == v.tolist()
    with pytest.raises(ContractError):
        ema(v, 0.0)
