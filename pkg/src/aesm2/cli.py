"""Command line: ``aesm2 {gen-data,train,eval,analyze}``.

A run directory holds ``config.yaml`` (the resolved config), ``checkpoint.npz``,
``metrics.csv``, ``steps.log`` and, after ``eval``/``analyze``, ``eval/`` and
``analysis/``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, write_text_atomic
from .data import Dataset, generate_synthetic, write_csv
from .errors import AESM2Error, CheckpointError, ConfigError, TrainingDiverged
from .evaluation import evaluate, kl_curves, metric_table, transfer_matrix, utilization
from .model import MODEL_KINDS, build_model
from .training import train, train_per_scenario

CONFIG_ECHO = "config.yaml"
CHECKPOINT = "checkpoint.npz"


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "model", None) is not None:
        cfg.model_kind = args.model
    if getattr(args, "no_aux", False):
        cfg.aux_loss = False
    if getattr(args, "no_noise", False):
        cfg.noise = False
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    cfg.validate()
    return cfg


def _summary(name: str, ds: Dataset) -> list[str]:
    lines = [f"{name}: {len(ds)} instances"]
    ids = ds.scenario_ids
    for s, label in enumerate(ds.schema.scenario_labels):
        rows = ids == s
        n = int(rows.sum())
        if n == 0:
            lines.append(f"  {label:<8} share 0.0000")
            continue
        ctr = ds.click[rows].mean()
        clicks = ds.click[rows].sum()
        cvr = ds.conversion[rows].sum() / clicks if clicks else float("nan")
        lines.append(f"  {label:<8} share {n / len(ds):.4f}  ctr {ctr:.4f}  cvr {cvr:.4f}")
    return lines


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    if cfg.data.kind != "synthetic":
        raise ConfigError("gen-data needs a synthetic data source")
    out = Path(args.out) if args.out else Path(cfg.out) / "data"
    data = generate_synthetic(cfg.data.synthetic, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        write_csv(getattr(data, name), out / f"{name}.csv")
    spec = cfg.data.synthetic
    write_text_atomic(out / "schema.yaml", yaml.safe_dump(spec.schema.to_dict(), sort_keys=False))
    write_text_atomic(
        out / "spec.yaml", yaml.safe_dump({"seed": cfg.seed, "synthetic": spec.to_dict()}, sort_keys=False)
    )
    for name in ("train", "val", "test"):
        print("\n".join(_summary(name, getattr(data, name))))
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    run_dir = Path(cfg.out)
    train_set, val_set, test_set = cfg.load_data()
    model_cfg = cfg.model_config(train_set.schema)
    model = build_model(cfg.model_kind, model_cfg)
    write_text_atomic(run_dir / CONFIG_ECHO, cfg.to_yaml())
    print(f"training {model.kind} ({model.n_parameters()} parameters) on {len(train_set)} instances")
    try:
        result = train(model, train_set, val_set, cfg.train_config(), run_dir=run_dir)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    save_checkpoint(result.model, run_dir / CHECKPOINT)
    for e in result.epochs:
        auc = "n/a" if e.val_auc_ctr is None else f"{e.val_auc_ctr:.4f}"
        print(f"epoch {e.epoch:>3}  loss {e.train_loss:.5f}  val ctr auc {auc}  {e.seconds:.1f}s")
    print(f"best epoch {result.best_epoch}; wrote {run_dir}")
    return 0


def _load_run(run_dir: Path, checkpoint=None):
    echo = run_dir / CONFIG_ECHO
    if not echo.exists():
        raise ConfigError(f"{run_dir} has no {CONFIG_ECHO}; run 'train' first or pass --config")
    cfg = load_config(echo)
    ckpt = Path(checkpoint) if checkpoint else run_dir / CHECKPOINT
    if not ckpt.exists():
        raise CheckpointError(f"no checkpoint at {ckpt}; run 'train' first")
    schema = cfg.schema()
    model = load_checkpoint(ckpt, config=cfg.model_config(schema), kind=cfg.model_kind)
    return cfg, model


def _run_dir(args) -> Path:
    if getattr(args, "run_dir", None):
        return Path(args.run_dir)
    if args.out:
        return Path(args.out)
    return Path(load_config(args.config).out)


def cmd_eval(args) -> int:
    run_dir = _run_dir(args)
    cfg, model = _load_run(run_dir, args.checkpoint)
    if args.seed is not None and args.seed != cfg.seed:
        raise ConfigError("--seed differs from the run's seed; evaluation uses the training data split")
    train_set, val_set, test_set = cfg.load_data()
    target = test_set if test_set is not None and len(test_set) else val_set
    if target is None or len(target) == 0:
        raise ConfigError("no evaluation data (test or val split)")
    report = evaluate(model, target)
    out = run_dir / "eval"
    report.save(out, "metrics")
    print(metric_table({model.kind: report}), end="")
    if args.transfer:
        models = train_per_scenario(cfg.model_kind, model.config, train_set, val_set, cfg.train_config())
        parts = target.by_scenario()
        tm = transfer_matrix(models, list(parts.values()), scenarios=list(parts))
        write_text_atomic(out / "transfer.csv", tm.to_csv())
        print(tm.to_csv(), end="")
    return 0


def cmd_analyze(args) -> int:
    run_dir = _run_dir(args)
    steps = run_dir / "steps.log"
    if not steps.exists():
        raise ConfigError(f"{run_dir} has no steps.log; run 'train' first")
    out = run_dir / "analysis"
    curves = kl_curves(steps)
    write_text_atomic(out / "kl_curves.csv", curves.to_csv())
    cfg, model = _load_run(run_dir)
    _, val_set, test_set = cfg.load_data()
    target = test_set if test_set is not None else val_set
    if target is None or len(target) == 0:
        raise ConfigError("evaluation set is empty; utilization needs instances")
    if model.kind in ("aesm2", "static_split"):
        for by in ("branch", "scenario"):
            rep = utilization(model, target, by=by)
            write_text_atomic(out / f"utilization_by_{by}.csv", rep.to_csv())
    else:
        print(f"{model.kind} routes densely; skipping expert utilization")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aesm2", description="Multi-scenario multi-task expert selection models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run config (defaults apply to missing fields)")
        sp.add_argument("--seed", type=int, help="seed for data, init, shuffling and noise")
        sp.add_argument("--out", help="output directory")

    g = sub.add_parser("gen-data", help="write synthetic train/val/test CSVs")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and save the best checkpoint")
    common(t)
    t.add_argument("--model", choices=MODEL_KINDS)
    t.add_argument("--no-aux", action="store_true", help="drop the auxiliary selection losses")
    t.add_argument("--no-noise", action="store_true", help="disable gate exploration noise")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AUC table for a trained run")
    common(e)
    e.add_argument("run_dir", nargs="?")
    e.add_argument("--checkpoint")
    e.add_argument("--transfer", action="store_true", help="also train per-scenario models and emit the transfer matrix")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="KL curves and expert utilization for a trained run")
    common(a)
    a.add_argument("run_dir", nargs="?")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except AESM2Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
