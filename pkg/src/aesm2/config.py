"""Run configuration: one YAML file describing data, model, training and ablations."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .data import Dataset, DatasetSchema, SyntheticSpec, generate_synthetic, load_csv
from .errors import ConfigError
from .model import MODEL_KINDS, ModelConfig
from .training import TrainConfig

# ModelConfig fields that follow from the data schema rather than the config file
_SCHEMA_FIELDS = {"feature_vocab", "scenario_branches", "n_tasks", "seed"}


@dataclass
class DataSource:
    kind: str = "synthetic"  # "synthetic" | "csv"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: str | None = None
    val: str | None = None
    test: str | None = None
    schema: str | None = None  # YAML file with the dataset schema

    def to_dict(self) -> dict:
        if self.kind == "synthetic":
            return {"kind": "synthetic", "synthetic": self.synthetic.to_dict()}
        return {"kind": "csv", "train": self.train, "val": self.val, "test": self.test, "schema": self.schema}

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path) -> DataSource:
        d = dict(d or {})
        kind = d.pop("kind", "synthetic")
        if kind == "synthetic":
            spec = SyntheticSpec.from_dict(d.pop("synthetic", {}) or {})
            if d:
                raise ConfigError(f"unknown data fields for synthetic source: {sorted(d)}")
            return cls("synthetic", spec)
        if kind != "csv":
            raise ConfigError(f"data.kind must be 'synthetic' or 'csv', got {kind!r}")
        unknown = set(d) - {"train", "val", "test", "schema"}
        if unknown:
            raise ConfigError(f"unknown data fields: {sorted(unknown)}")
        if not d.get("train") or not d.get("schema"):
            raise ConfigError("csv data needs at least 'train' and 'schema' paths")
        paths = {k: str((base_dir / v).resolve()) if v else None for k, v in d.items()}
        return cls("csv", train=paths.get("train"), val=paths.get("val"), test=paths.get("test"), schema=paths["schema"])


@dataclass
class RunConfig:
    """Everything needed to reproduce a run. Every field has a default."""

    seed: int = 0
    model_kind: str = "aesm2"
    data: DataSource = field(default_factory=DataSource)
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    training: TrainConfig = field(default_factory=TrainConfig)
    noise: bool = True
    aux_loss: bool = True
    out: str = "runs/default"

    def validate(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        bad = set(self.model) & _SCHEMA_FIELDS
        if bad:
            raise ConfigError(f"model fields {sorted(bad)} come from the data schema and the run seed")
        unknown = set(self.model) - set(ModelConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        self.training.validate()
        if self.data.kind == "synthetic":
            self.data.synthetic.validate()

    # -- derived objects --------------------------------------------------

    def schema(self) -> DatasetSchema:
        if self.data.kind == "synthetic":
            return self.data.synthetic.schema
        return load_schema(self.data.schema)

    def model_config(self, schema: DatasetSchema | None = None) -> ModelConfig:
        overrides = dict(self.model)
        for key in ("lambda_tasks",):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        if not self.aux_loss:
            overrides["lambda_specific"] = 0.0
            overrides["lambda_shared"] = 0.0
        if not self.noise:
            overrides["use_noise"] = False
        try:
            return ModelConfig.for_schema(schema or self.schema(), seed=self.seed, **overrides)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return replace(self.training, seed=self.seed)

    def load_data(self) -> tuple[Dataset, Dataset | None, Dataset | None]:
        """``(train, val, test)``; synthetic data are regenerated from the run seed."""
        if self.data.kind == "synthetic":
            d = generate_synthetic(self.data.synthetic, self.seed)
            return d.train, d.val, d.test
        schema = self.schema()
        parts = [load_csv(p, schema) if p else None for p in (self.data.train, self.data.val, self.data.test)]
        return parts[0], parts[1], parts[2]

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        training = self.training.to_dict()
        training.pop("seed")
        return {
            "seed": self.seed,
            "model_kind": self.model_kind,
            "noise": self.noise,
            "aux_loss": self.aux_loss,
            "out": self.out,
            "data": self.data.to_dict(),
            "model": {k: list(v) if isinstance(v, tuple) else v for k, v in self.model.items()},
            "training": training,
        }

    @classmethod
    def from_dict(cls, d: dict | None, base_dir=".") -> RunConfig:
        d = dict(d or {})
        known = {"seed", "model_kind", "noise", "aux_loss", "out", "data", "model", "training"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        training = dict(d.get("training") or {})
        if "seed" in training:
            raise ConfigError("set the seed at the top level, not under training")
        cfg = cls(
            seed=int(d.get("seed", 0)),
            model_kind=str(d.get("model_kind", "aesm2")),
            data=DataSource.from_dict(d.get("data") or {}, Path(base_dir)),
            model=dict(d.get("model") or {}),
            training=TrainConfig.from_dict(training),
            noise=bool(d.get("noise", True)),
            aux_loss=bool(d.get("aux_loss", True)),
            out=str(d.get("out", "runs/default")),
        )
        cfg.validate()
        return cfg

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def load_config(path=None) -> RunConfig:
    """Read a YAML run config; ``None`` gives the all-defaults config."""
    if path is None:
        return RunConfig.from_dict({})
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(raw, base_dir=path.parent)


def load_schema(path) -> DatasetSchema:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read schema {path}: {exc}") from exc
    return DatasetSchema.from_dict(raw)


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
