"""Hierarchical expert selection for multi-scenario, multi-task ranking.

Scenario layers route each instance through experts chosen by KL distance
between gating rows and one-hot/uniform references; task layers do the same
across tasks. Everything runs on a small numpy autodiff core.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    DatasetSchema,
    Instance,
    SyntheticSpec,
    batch_iter,
    default_schema,
    generate_synthetic,
    load_csv,
    write_csv,
)
from .errors import (
    AESM2Error,
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DomainError,
    LogFormatError,
    ShapeError,
    TrainingDiverged,
    UndefinedMetric,
)
from .evaluation import MetricReport, UtilizationReport, auc, evaluate, kl_curves, transfer_matrix, utilization
from .model import AESM2Model, HardSharingModel, ModelConfig, build_baseline, build_model
from .objective import AdamState, LossBreakdown, adam_step, total_loss
from .selection import kl_divergence, mask_gate, select_experts
from .training import TrainConfig, train

__version__ = "0.1.0"
