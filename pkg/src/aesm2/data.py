"""Dataset schema, columnar datasets, CSV I/O and the synthetic generator.

Scenarios are hierarchical: an instance carries one branch id per scenario
level (e.g. ``[channel, domain]``). The fine-grained scenario is the full
path. Labels are ``click`` and ``conversion`` with ``conversion => click``.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class Feature:
    name: str
    vocab_size: int


@dataclass(frozen=True)
class FeatureGroup:
    name: str
    features: tuple[Feature, ...]


@dataclass(frozen=True)
class ScenarioLevel:
    name: str
    branches: tuple[str, ...]


@dataclass(frozen=True)
class DatasetSchema:
    groups: tuple[FeatureGroup, ...]
    levels: tuple[ScenarioLevel, ...]
    tasks: tuple[str, ...] = ("ctr", "ctcvr")

    @property
    def features(self) -> list[tuple[str, Feature]]:
        return [(g.name, f) for g in self.groups for f in g.features]

    @property
    def feature_names(self) -> list[str]:
        return [f.name for _, f in self.features]

    @property
    def vocab_sizes(self) -> list[int]:
        return [f.vocab_size for _, f in self.features]

    @property
    def level_sizes(self) -> list[int]:
        return [len(level.branches) for level in self.levels]

    @property
    def n_scenarios(self) -> int:
        return math.prod(self.level_sizes)

    @property
    def scenario_labels(self) -> list[str]:
        """Fine-grained scenario names in row-major path order, e.g. ``HP&RI``."""
        paths = np.array(list(np.ndindex(*self.level_sizes)), dtype=np.int64)
        return [self.path_label(p) for p in paths]

    def path_label(self, path) -> str:
        return "&".join(level.branches[int(b)] for level, b in zip(self.levels, path))

    def scenario_paths(self) -> np.ndarray:
        return np.array(list(np.ndindex(*self.level_sizes)), dtype=np.int64).reshape(-1, len(self.levels))

    def scenario_index(self, paths: np.ndarray) -> np.ndarray:
        paths = np.asarray(paths, dtype=np.int64)
        return np.ravel_multi_index(tuple(paths.T), self.level_sizes)

    @property
    def csv_header(self) -> list[str]:
        return [lv.name for lv in self.levels] + self.feature_names + ["click", "conversion"]

    def to_dict(self) -> dict:
        return {
            "groups": [
                {"name": g.name, "features": [{"name": f.name, "vocab_size": f.vocab_size} for f in g.features]}
                for g in self.groups
            ],
            "levels": [{"name": lv.name, "branches": list(lv.branches)} for lv in self.levels],
            "tasks": list(self.tasks),
        }

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSchema:
        try:
            groups = tuple(
                FeatureGroup(g["name"], tuple(Feature(f["name"], int(f["vocab_size"])) for f in g["features"]))
                for g in d["groups"]
            )
            levels = tuple(ScenarioLevel(lv["name"], tuple(lv["branches"])) for lv in d["levels"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed schema: {exc}") from exc
        schema = cls(groups, levels, tuple(d.get("tasks", ("ctr", "ctcvr"))))
        names = schema.csv_header
        if len(set(names)) != len(names):
            raise ConfigError("schema column names must be unique")
        return schema


def default_schema() -> DatasetSchema:
    """Two scenario levels (channel -> domain) and three feature groups."""
    return DatasetSchema(
        groups=(
            FeatureGroup("user", (Feature("user_age", 12), Feature("user_segment", 24))),
            FeatureGroup("item", (Feature("item_category", 32), Feature("item_brand", 48))),
            FeatureGroup("query", (Feature("query_intent", 24), Feature("query_freq", 12))),
        ),
        levels=(ScenarioLevel("channel", ("HP", "VP")), ScenarioLevel("domain", ("RI", "BS"))),
    )


@dataclass(frozen=True)
class Instance:
    features: tuple[tuple[str, str, int], ...]  # (group, feature, value id)
    scenario_path: tuple[int, ...]
    click: int
    conversion: int


@dataclass(eq=False)
class Dataset:
    """Immutable columnar dataset. Row ``i`` is one :class:`Instance`."""

    schema: DatasetSchema
    scenarios: np.ndarray  # (N, n_levels)
    features: np.ndarray  # (N, n_features)
    click: np.ndarray  # (N,)
    conversion: np.ndarray  # (N,)

    def __post_init__(self):
        n_levels = len(self.schema.levels)
        n_feat = len(self.schema.feature_names)
        self.scenarios = np.asarray(self.scenarios, dtype=np.int64).reshape(-1, n_levels)
        self.features = np.asarray(self.features, dtype=np.int64).reshape(-1, n_feat)
        self.click = np.asarray(self.click, dtype=np.int64).reshape(-1)
        self.conversion = np.asarray(self.conversion, dtype=np.int64).reshape(-1)
        n = len(self.click)
        if not (len(self.scenarios) == len(self.features) == len(self.conversion) == n):
            raise DataError("column lengths differ")
        for arr, name in ((self.click, "click"), (self.conversion, "conversion")):
            if np.any((arr != 0) & (arr != 1)):
                raise DataError(f"{name} labels must be 0 or 1")
        bad = np.flatnonzero((self.conversion == 1) & (self.click == 0))
        if bad.size:
            raise DataError(f"row {bad[0]} has conversion=1 without click")
        for col, (size, name) in enumerate(zip(self.schema.level_sizes, (lv.name for lv in self.schema.levels))):
            v = self.scenarios[:, col]
            if v.size and (v.min() < 0 or v.max() >= size):
                raise DataError(f"scenario level {name!r} id outside [0, {size})")
        for col, (size, name) in enumerate(zip(self.schema.vocab_sizes, self.schema.feature_names)):
            v = self.features[:, col]
            if v.size and (v.min() < 0 or v.max() >= size):
                row = int(np.flatnonzero((v < 0) | (v >= size))[0])
                raise DataError(f"feature {name!r} id {int(v[row])} out of vocabulary (size {size}) at row {row}")
        for arr in (self.scenarios, self.features, self.click, self.conversion):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.click)

    def instance(self, i: int) -> Instance:
        feats = tuple(
            (group, feat.name, int(v)) for (group, feat), v in zip(self.schema.features, self.features[i])
        )
        return Instance(feats, tuple(int(s) for s in self.scenarios[i]), int(self.click[i]), int(self.conversion[i]))

    def __iter__(self) -> Iterator[Instance]:
        return (self.instance(i) for i in range(len(self)))

    @classmethod
    def from_instances(cls, schema: DatasetSchema, instances: Sequence[Instance]) -> Dataset:
        n_levels, n_feat = len(schema.levels), len(schema.feature_names)
        if not instances:
            return cls.empty(schema)
        for inst in instances:
            if len(inst.features) != n_feat or len(inst.scenario_path) != n_levels:
                raise DataError("instance does not match schema")
        return cls(
            schema,
            np.array([inst.scenario_path for inst in instances]),
            np.array([[v for _, _, v in inst.features] for inst in instances]),
            np.array([inst.click for inst in instances]),
            np.array([inst.conversion for inst in instances]),
        )

    @classmethod
    def empty(cls, schema: DatasetSchema) -> Dataset:
        return cls(
            schema,
            np.zeros((0, len(schema.levels))),
            np.zeros((0, len(schema.feature_names))),
            np.zeros(0),
            np.zeros(0),
        )

    def take(self, indices) -> Dataset:
        return Dataset(
            self.schema, self.scenarios[indices], self.features[indices], self.click[indices], self.conversion[indices]
        )

    @property
    def scenario_ids(self) -> np.ndarray:
        return self.schema.scenario_index(self.scenarios)

    def by_scenario(self) -> dict[str, Dataset]:
        ids = self.scenario_ids
        return {label: self.take(np.flatnonzero(ids == s)) for s, label in enumerate(self.schema.scenario_labels)}

    def same_as(self, other: Dataset) -> bool:
        return (
            self.schema == other.schema
            and np.array_equal(self.scenarios, other.scenarios)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.click, other.click)
            and np.array_equal(self.conversion, other.conversion)
        )


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    return Dataset(
        parts[0].schema,
        np.concatenate([p.scenarios for p in parts]),
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.click for p in parts]),
        np.concatenate([p.conversion for p in parts]),
    )


def batch_iter(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[Dataset]:
    """Yield consecutive batches over all scenarios; the last one may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        yield dataset.take(order[start : start + batch_size])


# ---------------------------------------------------------------------------
# CSV


def write_csv(dataset: Dataset, path) -> None:
    table = np.column_stack(
        [dataset.scenarios, dataset.features, dataset.click[:, None], dataset.conversion[:, None]]
    ).astype(np.int64)
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(dataset.schema.csv_header)
        writer.writerows(table.tolist())
    os.replace(tmp, path)


def load_csv(path, schema: DatasetSchema) -> Dataset:
    """Parse a CSV whose header matches ``schema.csv_header`` exactly."""
    expected = schema.csv_header
    n_levels, n_feat = len(schema.levels), len(schema.feature_names)
    limits = schema.level_sizes + schema.vocab_sizes + [2, 2]
    rows: list[list[int]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError("missing header row", line=1)
        if header != expected:
            unknown = [c for c in header if c not in expected]
            missing = [c for c in expected if c not in header]
            detail = f"unknown columns {unknown}" if unknown else f"missing columns {missing}"
            if not unknown and not missing:
                detail = "columns out of order"
            raise DataError(f"header mismatch: {detail}", line=1)
        for line_no, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(expected):
                raise DataError(f"expected {len(expected)} fields, got {len(raw)}", line=line_no)
            try:
                values = [int(v) for v in raw]
            except ValueError:
                raise DataError(f"non-integer field in {raw!r}", line=line_no) from None
            for col, (v, lim) in enumerate(zip(values, limits)):
                if not 0 <= v < lim:
                    raise DataError(f"{expected[col]}={v} outside [0, {lim})", line=line_no)
            if values[-1] == 1 and values[-2] == 0:
                raise DataError("conversion=1 without click", line=line_no)
            rows.append(values)
    if not rows:
        return Dataset.empty(schema)
    table = np.array(rows, dtype=np.int64)
    return Dataset(
        schema,
        table[:, :n_levels],
        table[:, n_levels : n_levels + n_feat],
        table[:, -2],
        table[:, -1],
    )


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Ground-truth world for hierarchical multi-scenario click/conversion data.

    Each fine-grained scenario ``s`` with path ``(b_1, ..., b_L)`` gets a click
    weight vector ``sum_l level_weights[l] * u_l[b_l] + global_weight * u_g
    + (1 - sum - global_weight) * u_s`` (then normalized), with all ``u``
    mutually orthogonal. Conversion weights mix the click weights with an
    independent set built the same way.
    """

    schema: DatasetSchema = field(default_factory=default_schema)
    level_weights: tuple[float, ...] = (0.3, 0.3)
    global_weight: float = 0.0
    shares: tuple[float, ...] = (0.13, 0.29, 0.52, 0.06)
    ctr_base: tuple[float, ...] = (0.30, 0.10, 0.40, 0.15)
    cvr_base: tuple[float, ...] = (0.20, 0.15, 0.18, 0.12)
    signal: float = 2.0
    task_correlation: float = 0.5
    truth_dim: int = 8
    n_train: int = 200_000
    n_val: int = 20_000
    n_test: int = 20_000

    def validate(self):
        s = self.schema
        n = s.n_scenarios
        if len(self.level_weights) != len(s.levels):
            raise ConfigError(f"level_weights needs {len(s.levels)} entries")
        weights = list(self.level_weights) + [self.global_weight]
        if any(not 0 <= w <= 1 for w in weights):
            raise ConfigError("mixing weights must lie in [0, 1]")
        if sum(weights) > 1 + 1e-12:
            raise ConfigError(f"mixing weights sum to {sum(weights):.3f} > 1")
        for name in ("shares", "ctr_base", "cvr_base"):
            vals = getattr(self, name)
            if len(vals) != n:
                raise ConfigError(f"{name} needs one entry per scenario ({n})")
        if any(v < 0 for v in self.shares) or not math.isclose(sum(self.shares), 1.0, abs_tol=1e-6):
            raise ConfigError("shares must be non-negative and sum to 1")
        if any(not 0 < v < 1 for v in (*self.ctr_base, *self.cvr_base)):
            raise ConfigError("base rates must lie in (0, 1)")
        if not 0 <= self.task_correlation <= 1:
            raise ConfigError("task_correlation must lie in [0, 1]")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train + self.n_val + self.n_test == 0:
            raise ConfigError("sample counts must be non-negative and not all zero")
        if min(s.vocab_sizes) <= self.truth_dim:
            raise ConfigError("every vocab size must exceed truth_dim")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = self.schema.to_dict()
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        d = dict(d)
        if "schema" in d:
            d["schema"] = DatasetSchema.from_dict(d["schema"])
        for k in ("level_weights", "shares", "ctr_base", "cvr_base"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SyntheticWorld:
    truth_tables: list[np.ndarray]
    ctr_weights: np.ndarray  # (n_scenarios, D)
    cvr_weights: np.ndarray
    ctr_bias: np.ndarray
    cvr_bias: np.ndarray

    def features_to_phi(self, features: np.ndarray) -> np.ndarray:
        return np.concatenate([t[features[:, i]] for i, t in enumerate(self.truth_tables)], axis=1)

    def probabilities(self, dataset: Dataset, signal: float) -> tuple[np.ndarray, np.ndarray]:
        """True click probability and conversion-given-click probability per row."""
        phi = self.features_to_phi(dataset.features)
        s = dataset.scenario_ids
        a = signal * np.einsum("nd,nd->n", phi, self.ctr_weights[s]) + self.ctr_bias[s]
        c = signal * np.einsum("nd,nd->n", phi, self.cvr_weights[s]) + self.cvr_bias[s]
        return _sigmoid(a), _sigmoid(c)


@dataclass
class SyntheticData:
    train: Dataset
    val: Dataset
    test: Dataset
    world: SyntheticWorld


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def _allocate(n: int, shares: Sequence[float]) -> np.ndarray:
    """Integer counts summing to ``n`` that follow ``shares`` (largest remainder)."""
    raw = np.asarray(shares) * n
    counts = np.floor(raw).astype(np.int64)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def _build_world(spec: SyntheticSpec, rng: np.random.Generator) -> SyntheticWorld:
    schema = spec.schema
    dt = spec.truth_dim
    tables = []
    for vocab in schema.vocab_sizes:
        a = rng.standard_normal((vocab, dt))
        a -= a.mean(axis=0)
        q, _ = np.linalg.qr(a)
        # isotropic, zero-mean embedding under uniform ids
        tables.append(q * math.sqrt(vocab))
    D = dt * len(tables)
    n_scen = schema.n_scenarios
    per_task = sum(schema.level_sizes) + 1 + n_scen
    if 2 * per_task > D:
        raise ConfigError(f"truth space of dimension {D} too small for {2 * per_task} directions")
    dirs = _orthonormal(rng, D, 2 * per_task).T
    paths = schema.scenario_paths()
    own = 1.0 - sum(spec.level_weights) - spec.global_weight

    def weights_from(block: np.ndarray) -> np.ndarray:
        offsets = np.cumsum([0] + schema.level_sizes)
        glob = block[offsets[-1]]
        own_dirs = block[offsets[-1] + 1 :]
        w = np.zeros((n_scen, D))
        for s, path in enumerate(paths):
            for lvl, b in enumerate(path):
                w[s] += spec.level_weights[lvl] * block[offsets[lvl] + b]
            w[s] += spec.global_weight * glob + own * own_dirs[s]
        return w / np.linalg.norm(w, axis=1, keepdims=True)

    ctr_w = weights_from(dirs[:per_task])
    alt_w = weights_from(dirs[per_task:])
    rho = spec.task_correlation
    cvr_w = rho * ctr_w + math.sqrt(1.0 - rho * rho) * alt_w

    # calibrate biases so per-scenario rates match ctr_base/cvr_base on a reference sample
    cal_ids = np.column_stack([rng.integers(0, v, size=20_000) for v in schema.vocab_sizes])
    phi = np.concatenate([t[cal_ids[:, i]] for i, t in enumerate(tables)], axis=1)
    ctr_b = np.zeros(n_scen)
    cvr_b = np.zeros(n_scen)
    for s in range(n_scen):
        a = spec.signal * phi @ ctr_w[s]
        c = spec.signal * phi @ cvr_w[s]
        ctr_b[s] = brentq(lambda b: _sigmoid(a + b).mean() - spec.ctr_base[s], -40, 40, xtol=1e-12)
        pc = _sigmoid(a + ctr_b[s])
        cvr_b[s] = brentq(
            lambda b: (pc * _sigmoid(c + b)).mean() / pc.mean() - spec.cvr_base[s], -40, 40, xtol=1e-12
        )
    return SyntheticWorld(tables, ctr_w, cvr_w, ctr_b, cvr_b)


def _sample_split(spec: SyntheticSpec, world: SyntheticWorld, n: int, rng: np.random.Generator) -> Dataset:
    schema = spec.schema
    counts = _allocate(n, spec.shares)
    scen = rng.permutation(np.repeat(np.arange(schema.n_scenarios), counts))
    paths = schema.scenario_paths()[scen] if n else np.zeros((0, len(schema.levels)), dtype=np.int64)
    feats = np.column_stack([rng.integers(0, v, size=n) for v in schema.vocab_sizes]) if n else np.zeros(
        (0, len(schema.vocab_sizes)), dtype=np.int64
    )
    draft = Dataset(schema, paths, feats, np.zeros(n), np.zeros(n))
    p_click, p_conv = world.probabilities(draft, spec.signal)
    click = (rng.random(n) < p_click).astype(np.int64)
    conv = click * (rng.random(n) < p_conv).astype(np.int64)
    return Dataset(schema, paths, feats, click, conv)


def generate_synthetic(spec: SyntheticSpec | None = None, seed: int = 0) -> SyntheticData:
    """Sample train/val/test splits from one seeded ground-truth world."""
    spec = spec or SyntheticSpec()
    spec.validate()
    world_rng, sample_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([seed, 7001]).spawn(2))
    world = _build_world(spec, world_rng)
    splits = [_sample_split(spec, world, n, sample_rng) for n in (spec.n_train, spec.n_val, spec.n_test)]
    return SyntheticData(*splits, world=world)
