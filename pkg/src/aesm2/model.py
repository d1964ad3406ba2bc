"""AESM2 network and the comparison baselines.

Layout of the selecting model::

    features -> shared embeddings x
    x -> scenario layer 1 (branches = level-1 ids, gates see [h, s_1])
      -> scenario layer 2 (gates see [h, s_1, s_2]) ... -> z
    z -> task layer 1 (one branch per task, gates see [z, s_path, t_k])
      -> task layer 2 (per-task inputs, shared experts) ... -> z_k
    z_k -> tower_k -> sigmoid

Every layer is a mixture of single-layer ReLU experts. ``routing`` decides
how each branch weights them: ``"select"`` (KL-based specific + shared
selection), ``"dense"`` (plain MMoE softmax over all experts) or
``"static"`` (a fixed, configured specific/shared partition).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, DatasetSchema
from .errors import ConfigError, DataError, ShapeError
from .selection import GatingMatrix, active_mask, compute_gate, mask_gate, select_batch
from .tensor import Tensor

MODEL_KINDS = ("aesm2", "mmoe", "hard_sharing", "static_split")
BASELINE_KINDS = ("hard_sharing", "mmoe", "static_split")


@dataclass
class ModelConfig:
    feature_vocab: tuple[tuple[str, int], ...] = ()
    scenario_branches: tuple[int, ...] = (2, 2)
    n_tasks: int = 2
    embed_dim: int = 8
    scenario_embed_dim: int = 8
    task_embed_dim: int = 8
    n_task_layers: int = 2
    n_scenario_experts: int = 6
    n_task_experts: int = 6
    k_specific_scenario: int = 1
    k_shared_scenario: int = 1
    k_specific_task: int = 1
    k_shared_task: int = 1
    expert_dim: int = 32
    tower_hidden: int = 32
    noise_scale: float = 0.01
    use_noise: bool = True
    lambda_tasks: tuple[float, ...] = (1.0, 1.0)
    lambda_specific: float = 0.1
    lambda_shared: float = 0.1
    l2: float = 1e-5
    seed: int = 0
    # {"scenario": [{"specific": [[...] per branch], "shared": [...]}, ...], "task": [...]}
    static_partition: dict | None = None

    @classmethod
    def for_schema(cls, schema: DatasetSchema, **overrides) -> ModelConfig:
        base = dict(
            feature_vocab=tuple((f.name, f.vocab_size) for _, f in schema.features),
            scenario_branches=tuple(schema.level_sizes),
            n_tasks=len(schema.tasks),
        )
        base.update(overrides)
        cfg = cls(**base)
        cfg.validate()
        return cfg

    @property
    def n_scenario_layers(self) -> int:
        return len(self.scenario_branches)

    @property
    def input_dim(self) -> int:
        return self.embed_dim * len(self.feature_vocab)

    def validate(self):
        if not self.feature_vocab:
            raise ConfigError("feature_vocab is empty")
        if self.n_task_layers < 1 or self.n_scenario_layers < 1:
            raise ConfigError("need at least one scenario layer and one task layer")
        if len(self.lambda_tasks) != self.n_tasks:
            raise ConfigError("lambda_tasks needs one weight per task")
        for k, n, name in (
            (self.k_specific_scenario, self.n_scenario_experts, "k_specific_scenario"),
            (self.k_shared_scenario, self.n_scenario_experts, "k_shared_scenario"),
            (self.k_specific_task, self.n_task_experts, "k_specific_task"),
            (self.k_shared_task, self.n_task_experts, "k_shared_task"),
        ):
            if not 1 <= k <= n:
                raise ConfigError(f"{name}={k} must lie in [1, {n}]")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be non-negative")
        if min(self.lambda_specific, self.lambda_shared, self.l2, *self.lambda_tasks) < 0:
            raise ConfigError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_vocab"] = [[n, v] for n, v in self.feature_vocab]
        d["scenario_branches"] = list(self.scenario_branches)
        d["lambda_tasks"] = list(self.lambda_tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        if "feature_vocab" in d:
            d["feature_vocab"] = tuple((str(n), int(v)) for n, v in d["feature_vocab"])
        for key in ("scenario_branches", "lambda_tasks"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# traces


@dataclass
class BranchSelection:
    """Routing decisions of one branch gate for every instance of a batch."""

    branch: np.ndarray  # (B,)
    weights: np.ndarray  # (B, n) mixture weights after masking
    specific: np.ndarray | None = None  # (B, K_sp)
    shared: np.ndarray | None = None  # (B, K_sh)
    kl_specific: np.ndarray | None = None  # (B, n)
    kl_shared: np.ndarray | None = None

    @property
    def active(self) -> np.ndarray:
        return self.weights > 0


@dataclass
class LayerTrace:
    kind: str  # "scenario" | "task"
    index: int
    gating: GatingMatrix
    selections: list[BranchSelection]

    @property
    def name(self) -> str:
        return f"{self.kind}.{self.index}"


@dataclass
class ForwardTrace:
    layers: list[LayerTrace] = field(default_factory=list)

    def of_kind(self, kind: str) -> list[LayerTrace]:
        return [layer for layer in self.layers if layer.kind == kind]


@dataclass
class Predictions:
    ctr: Tensor
    cvr: Tensor
    ctcvr: Tensor

    def heads(self) -> list[Tensor]:
        """Supervised heads in task order: CTR, CTCVR."""
        return [self.ctr, self.ctcvr]


def esmm_combine(ctr, cvr):
    """Entire-space conversion: P(click & convert) = P(click) * P(convert | click)."""
    if isinstance(ctr, Tensor) or isinstance(cvr, Tensor):
        return T.mul(T.as_tensor(ctr), T.as_tensor(cvr))
    return np.multiply(ctr, cvr)


# ---------------------------------------------------------------------------
# building blocks


def _glorot(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass
class LayerParams:
    """Experts and per-branch gates of one scenario or task layer."""

    kind: str
    index: int
    experts: list[tuple[Tensor, Tensor]]
    gates: list[tuple[Tensor, Tensor]]

    @classmethod
    def init(cls, kind, index, rng, in_dim, gate_extra, n_experts, n_branches, out_dim) -> LayerParams:
        experts = [
            (Tensor(_glorot(rng, in_dim, out_dim), True), Tensor(np.zeros(out_dim), True))
            for _ in range(n_experts)
        ]
        gates = [
            (Tensor(_glorot(rng, in_dim + gate_extra, n_experts), True), Tensor(np.zeros(n_experts), True))
            for _ in range(n_branches)
        ]
        return cls(kind, index, experts, gates)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def named(self):
        prefix = f"{self.kind}.{self.index}"
        for i, (w, b) in enumerate(self.experts):
            yield f"{prefix}.expert.{i}.W", w
            yield f"{prefix}.expert.{i}.b", b
        for j, (w, b) in enumerate(self.gates):
            yield f"{prefix}.gate.{j}.W", w
            yield f"{prefix}.gate.{j}.b", b


def expert_stack(inputs: Tensor, experts: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """All expert outputs ``relu(W_i x + b_i)`` as a ``(B, n, h)`` tensor."""
    out_dims = {w.shape[1] for w, _ in experts}
    if len(out_dims) != 1:
        raise ConfigError(f"experts disagree on output dimension: {sorted(out_dims)}")
    h = out_dims.pop()
    w = T.concat([w for w, _ in experts], axis=1)
    b = T.concat([b for _, b in experts], axis=0)
    out = T.relu(T.matmul(inputs, w) + b)
    return T.reshape(out, (inputs.shape[0], len(experts), h))


def mmoe_forward(inputs: Tensor, experts, gate_logits: Tensor, expert_out: Tensor | None = None) -> Tensor:
    """``sum_i softmax(gate_logits)[i] * f_i(inputs)``; masked logits give a sparse mixture."""
    if expert_out is None:
        expert_out = expert_stack(inputs, experts)
    return T.weighted_sum(T.softmax(gate_logits, axis=1), expert_out)


@dataclass
class Routing:
    mode: str  # "select" | "dense" | "static"
    k_specific: int
    k_shared: int
    noise_scale: float
    specific_table: np.ndarray | None = None  # (m, K_sp) for static mode
    shared_table: np.ndarray | None = None  # (m, K_sh)


def _route(
    layer: LayerParams,
    gating: GatingMatrix,
    branch_logits: Tensor,
    branch: np.ndarray,
    routing: Routing,
    expert_out: Tensor,
) -> tuple[Tensor, BranchSelection]:
    n = layer.n_experts
    sel = BranchSelection(branch=branch, weights=None)
    if routing.mode == "dense":
        weights = T.softmax(branch_logits, axis=1)
    else:
        if routing.mode == "select":
            sp, sh, kl_sp, kl_sh = select_batch(gating.normalized.data, branch, routing.k_specific, routing.k_shared)
            sel.kl_specific, sel.kl_shared = kl_sp, kl_sh
        else:
            sp, sh = routing.specific_table[branch], routing.shared_table[branch]
        sel.specific, sel.shared = sp, sh
        masked = mask_gate(branch_logits, active_mask(n, sp, sh))
        weights = T.softmax(masked, axis=1)
    sel.weights = weights.data
    return T.weighted_sum(weights, expert_out), sel


def scenario_layer_forward(
    layer: LayerParams,
    inputs: Tensor,
    s_prefix: Tensor,
    branch: np.ndarray,
    routing: Routing,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, LayerTrace]:
    """One multi-scenario layer: gate all branches, route the instance's own branch."""
    B = inputs.shape[0]
    gate_in = T.concat([inputs, s_prefix], axis=1)
    logits = [
        compute_gate(gate_in, None, w, b, routing.noise_scale, training, rng) for w, b in layer.gates
    ]
    gating = GatingMatrix.from_logits(logits)
    n = layer.n_experts
    own = T.take(gating.raw, (np.arange(B)[:, None], np.arange(n)[None, :], branch[:, None]))
    expert_out = expert_stack(inputs, layer.experts)
    z, sel = _route(layer, gating, own, branch, routing, expert_out)
    return z, LayerTrace("scenario", layer.index, gating, [sel])


def task_layer_forward(
    layer: LayerParams,
    inputs: Sequence[Tensor],
    s_path: Tensor,
    task_embeddings: Sequence[Tensor],
    routing: Routing,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[list[Tensor], LayerTrace]:
    """One multi-task layer. ``inputs[k]`` feeds task ``k``; the experts are shared."""
    B = inputs[0].shape[0]
    logits = []
    for (w, b), x_k, t_k in zip(layer.gates, inputs, task_embeddings):
        gate_in = T.concat([x_k, s_path, t_k], axis=1)
        logits.append(compute_gate(gate_in, None, w, b, routing.noise_scale, training, rng))
    gating = GatingMatrix.from_logits(logits)
    cache: dict[int, Tensor] = {}
    outputs, selections = [], []
    for k, x_k in enumerate(inputs):
        if id(x_k) not in cache:
            cache[id(x_k)] = expert_stack(x_k, layer.experts)
        z, sel = _route(layer, gating, logits[k], np.full(B, k), routing, cache[id(x_k)])
        outputs.append(z)
        selections.append(sel)
    return outputs, LayerTrace("task", layer.index, gating, selections)


# ---------------------------------------------------------------------------
# models


class BaseModel:
    kind = "base"

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        rng = self._init_rng
        for name, vocab in config.feature_vocab:
            self._add(f"embed.{name}", rng.uniform(-0.01, 0.01, size=(vocab, config.embed_dim)))
        for lvl, nb in enumerate(config.scenario_branches):
            self._add(f"scenario_embed.{lvl}", rng.uniform(-0.01, 0.01, size=(nb, config.scenario_embed_dim)))
        self._add("task_embed", rng.uniform(-0.01, 0.01, size=(config.n_tasks, config.task_embed_dim)))

    def _add(self, name, value) -> Tensor:
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)
        t.requires_grad = True
        t.name = name
        self.params[name] = t
        return t

    def _init_towers(self, in_dim):
        rng, h = self._init_rng, self.config.tower_hidden
        for k in range(self.config.n_tasks):
            self._add(f"tower.{k}.0.W", _glorot(rng, in_dim, h))
            self._add(f"tower.{k}.0.b", np.zeros(h))
            self._add(f"tower.{k}.1.W", _glorot(rng, h, 1))
            self._add(f"tower.{k}.1.b", np.zeros(1))

    @property
    def weight_names(self) -> list[str]:
        """Parameters covered by L2: weight matrices outside the embedding tables."""
        return [n for n in self.params if n.endswith(".W")]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            self.params[k].data[...] = v

    def embed(self, batch: Dataset) -> tuple[Tensor, list[Tensor], list[Tensor]]:
        """Feature vector ``x``, scenario embeddings per level, task embeddings per task."""
        cfg = self.config
        B = len(batch)
        if batch.features.shape[1] != len(cfg.feature_vocab):
            raise ShapeError("batch features do not match the model's feature list")
        for i, (name, vocab) in enumerate(cfg.feature_vocab):
            col = batch.features[:, i]
            if col.size and (col.min() < 0 or col.max() >= vocab):
                bad = int(col[(col < 0) | (col >= vocab)][0])
                raise DataError(f"feature {name!r}: id {bad} outside the model vocabulary of size {vocab}")
        parts = [T.take(self.params[f"embed.{name}"], batch.features[:, i]) for i, (name, _) in enumerate(cfg.feature_vocab)]
        x = T.concat(parts, axis=1)
        s_list = [
            T.take(self.params[f"scenario_embed.{lvl}"], batch.scenarios[:, lvl]) for lvl in range(cfg.n_scenario_layers)
        ]
        t_all = [T.take(self.params["task_embed"], np.full(B, k)) for k in range(cfg.n_tasks)]
        return x, s_list, t_all

    def _towers(self, outputs: Sequence[Tensor]) -> Predictions:
        probs = []
        for k, z in enumerate(outputs):
            p = self.params
            h = T.relu(T.matmul(z, p[f"tower.{k}.0.W"]) + p[f"tower.{k}.0.b"])
            logit = T.matmul(h, p[f"tower.{k}.1.W"]) + p[f"tower.{k}.1.b"]
            probs.append(T.sigmoid(T.reshape(logit, (z.shape[0],))))
        ctr, cvr = probs[0], probs[1]
        return Predictions(ctr=ctr, cvr=cvr, ctcvr=esmm_combine(ctr, cvr))

    def forward(self, batch: Dataset, training: bool = False, rng=None) -> tuple[Predictions, ForwardTrace]:
        raise NotImplementedError

    def predict(self, dataset: Dataset, batch_size: int = 8192) -> dict[str, np.ndarray]:
        out = {"ctr": [], "cvr": [], "ctcvr": []}
        with T.no_grad():
            for start in range(0, len(dataset), batch_size):
                preds, _ = self.forward(dataset.take(slice(start, start + batch_size)))
                out["ctr"].append(preds.ctr.data)
                out["cvr"].append(preds.cvr.data)
                out["ctcvr"].append(preds.ctcvr.data)
        return {k: np.concatenate(v) if v else np.zeros(0) for k, v in out.items()}


def default_partition(n_experts: int, n_branches: int, k_specific: int, k_shared: int) -> dict:
    """Disjoint fixed groups: branch ``j`` owns ``k_specific`` experts, then one shared group."""
    need = n_branches * k_specific + k_shared
    if need > n_experts:
        raise ConfigError(f"static partition needs {need} experts, layer has {n_experts}")
    specific = [list(range(j * k_specific, (j + 1) * k_specific)) for j in range(n_branches)]
    shared = list(range(n_branches * k_specific, need))
    return {"specific": specific, "shared": shared}


class AESM2Model(BaseModel):
    """Hierarchical scenario -> task mixture-of-experts with per-instance routing."""

    def __init__(self, config: ModelConfig, routing: str = "select"):
        if routing not in ("select", "dense", "static"):
            raise ConfigError(f"unknown routing {routing!r}")
        super().__init__(config)
        self.routing_mode = routing
        self.kind = {"select": "aesm2", "dense": "mmoe", "static": "static_split"}[routing]
        cfg, rng = config, self._init_rng
        self.scenario_layers: list[LayerParams] = []
        in_dim = cfg.input_dim
        for lvl, nb in enumerate(cfg.scenario_branches):
            layer = LayerParams.init(
                "scenario", lvl, rng, in_dim, (lvl + 1) * cfg.scenario_embed_dim,
                cfg.n_scenario_experts, nb, cfg.expert_dim,
            )
            self.scenario_layers.append(layer)
            in_dim = cfg.expert_dim
        self.task_layers: list[LayerParams] = []
        gate_extra = cfg.n_scenario_layers * cfg.scenario_embed_dim + cfg.task_embed_dim
        for lvl in range(cfg.n_task_layers):
            layer = LayerParams.init(
                "task", lvl, rng, cfg.expert_dim, gate_extra, cfg.n_task_experts, cfg.n_tasks, cfg.expert_dim
            )
            self.task_layers.append(layer)
        for layer in self.scenario_layers + self.task_layers:
            for name, t in layer.named():
                self._add(name, t)
        self._init_towers(cfg.expert_dim)
        self._routings = self._build_routings()

    def _build_routings(self) -> dict[str, Routing]:
        cfg = self.config
        noise = cfg.noise_scale if (cfg.use_noise and self.routing_mode == "select") else 0.0
        routings = {}
        for layer in self.scenario_layers + self.task_layers:
            if layer.kind == "scenario":
                k_sp, k_sh = cfg.k_specific_scenario, cfg.k_shared_scenario
            else:
                k_sp, k_sh = cfg.k_specific_task, cfg.k_shared_task
            r = Routing(self.routing_mode, k_sp, k_sh, noise)
            if self.routing_mode == "static":
                part = None
                if cfg.static_partition is not None:
                    part = cfg.static_partition[layer.kind][layer.index]
                else:
                    part = default_partition(layer.n_experts, len(layer.gates), k_sp, k_sh)
                m = len(layer.gates)
                spec = part["specific"]
                shared = part["shared"]
                if shared and not isinstance(shared[0], (list, tuple)):
                    shared = [shared] * m
                r.specific_table = np.array(spec, dtype=np.int64).reshape(m, -1)
                r.shared_table = np.array(shared, dtype=np.int64).reshape(m, -1)
                if r.specific_table.size == 0 or r.specific_table.max() >= layer.n_experts:
                    raise ConfigError(f"static partition for {layer.kind}.{layer.index} is invalid")
            routings[f"{layer.kind}.{layer.index}"] = r
        return routings

    def forward(self, batch: Dataset, training: bool = False, rng=None) -> tuple[Predictions, ForwardTrace]:
        cfg = self.config
        if batch.scenarios.shape[1] != cfg.n_scenario_layers:
            raise ShapeError(
                f"scenario path has {batch.scenarios.shape[1]} levels, model has {cfg.n_scenario_layers} scenario layers"
            )
        x, s_list, t_all = self.embed(batch)
        trace = ForwardTrace()
        h = x
        for lvl, layer in enumerate(self.scenario_layers):
            s_prefix = T.concat(s_list[: lvl + 1], axis=1)
            h, lt = scenario_layer_forward(
                layer, h, s_prefix, batch.scenarios[:, lvl], self._routings[f"scenario.{lvl}"], training, rng
            )
            trace.layers.append(lt)
        s_path = T.concat(s_list, axis=1)
        inputs = [h] * cfg.n_tasks
        for lvl, layer in enumerate(self.task_layers):
            inputs, lt = task_layer_forward(layer, inputs, s_path, t_all, self._routings[f"task.{lvl}"], training, rng)
            trace.layers.append(lt)
        return self._towers(inputs), trace


class HardSharingModel(BaseModel):
    """Shared ReLU bottom over ``[x, s_path]`` followed by per-task towers."""

    kind = "hard_sharing"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        cfg, rng = config, self._init_rng
        in_dim = cfg.input_dim + cfg.n_scenario_layers * cfg.scenario_embed_dim
        self.depth = cfg.n_scenario_layers + cfg.n_task_layers
        for i in range(self.depth):
            self._add(f"bottom.{i}.W", _glorot(rng, in_dim, cfg.expert_dim))
            self._add(f"bottom.{i}.b", np.zeros(cfg.expert_dim))
            in_dim = cfg.expert_dim
        self._init_towers(cfg.expert_dim)

    def forward(self, batch: Dataset, training: bool = False, rng=None) -> tuple[Predictions, ForwardTrace]:
        x, s_list, _ = self.embed(batch)
        h = T.concat([x, *s_list], axis=1)
        for i in range(self.depth):
            h = T.relu(T.matmul(h, self.params[f"bottom.{i}.W"]) + self.params[f"bottom.{i}.b"])
        return self._towers([h] * self.config.n_tasks), ForwardTrace()


def build_model(kind: str, config: ModelConfig) -> BaseModel:
    """Construct any supported model. Baselines train without auxiliary loss or gate noise."""
    if kind == "aesm2":
        return AESM2Model(config, "select")
    return build_baseline(kind, config)


def build_baseline(kind: str, config: ModelConfig) -> BaseModel:
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline {kind!r}; expected one of {BASELINE_KINDS}")
    config = replace(config, lambda_specific=0.0, lambda_shared=0.0, use_noise=False)
    if kind == "hard_sharing":
        return HardSharingModel(config)
    if kind == "mmoe":
        return AESM2Model(config, "dense")
    return AESM2Model(config, "static")
