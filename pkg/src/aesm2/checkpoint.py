"""Model checkpoints as ``.npz`` archives: named float64 tensors plus the model config."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import BaseModel, ModelConfig, build_model

FORMAT = "aesm2-checkpoint/1"


def save_checkpoint(model: BaseModel, path) -> Path:
    """Write parameters and config atomically. Values round-trip bit for bit."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"kind": model.kind, "config": model.config.to_dict()}
    arrays = {f"param/{k}": np.asarray(v.data, dtype=np.float64) for k, v in model.params.items()}
    tmp = path.with_name(path.name + ".tmp.npz")
    with open(tmp, "wb") as fh:
        np.savez(fh, __format__=np.array(FORMAT), __meta__=np.array(json.dumps(meta)), **arrays)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, params)`` without building a model."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as z:
            fmt = str(z["__format__"]) if "__format__" in z.files else None
            if fmt != FORMAT:
                raise CheckpointError(f"{path}: unsupported checkpoint format {fmt!r}")
            meta = json.loads(str(z["__meta__"]))
            params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    return meta, params


def load_into(model: BaseModel, params: dict[str, np.ndarray]) -> None:
    """Copy ``params`` into ``model``; any missing, unexpected or misshapen tensor is an error."""
    problems = []
    for name, t in model.params.items():
        if name not in params:
            problems.append(f"{name}: missing from checkpoint")
        elif params[name].shape != t.shape:
            problems.append(f"{name}: checkpoint {params[name].shape} vs model {t.shape}")
    for name in params:
        if name not in model.params:
            problems.append(f"{name}: not a parameter of this model")
    if problems:
        raise CheckpointError("checkpoint does not match the model:\n  " + "\n  ".join(problems))
    model.load_state(params)


def load_checkpoint(path, config: ModelConfig | None = None, kind: str | None = None) -> BaseModel:
    """Rebuild a model from a checkpoint.

    When ``config``/``kind`` are given they take precedence over the stored
    ones, and the stored tensors must fit them.
    """
    meta, params = read_checkpoint(path)
    try:
        cfg = config or ModelConfig.from_dict(meta["config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"{path}: stored config is invalid ({exc})") from exc
    model = build_model(kind or meta["kind"], cfg)
    load_into(model, params)
    return model
