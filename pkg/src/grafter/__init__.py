"""grafter: composable multi-task fine-tuning for graph convolutional networks.

A frozen (or jointly trained) GCN backbone is specialized to many graph-level
tasks at once by a shared bank of low-rank residual adapters. A learnable
task-adapter relation matrix routes each task to a sparse mixture of adapters
(temperature softmax plus a gating threshold), and a pairwise consistency
penalty pulls the outputs of co-activated adapters together.
"""

# assigned before the submodule imports below: harness reads it at import time
__version__ = "0.1.0"

from .adapters import AdapterBank, AdapterParams, adapter_forward, bank_forward
from .backbone import Backbone, GcnLayer, glorot_uniform, layer_forward
from .checkpoint import load_checkpoint, read_tensors, save_checkpoint, write_tensors
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    GrafterError,
    IntegrityError,
    NumericError,
    ParseError,
    StateError,
)
from .graphs import Graph, GraphBatch, adjacency, make_batch, mean_pool, normalize_adjacency
from .harness import RunSettings, parse_grid, run_sweep, run_training_job
from .metrics import ApResult, ComputeCounter, average_precision, awa
from .model import ComposedGcn, ForwardResult, ParamCounts
from .objectives import (
    CoactivationWeights,
    LossReport,
    ObjectiveConfig,
    beta_from_alpha,
    consistency_reg,
    per_task_loss,
    predict_probabilities,
    relation_reg,
    task_loss,
    total_loss,
)
from .routing import (
    RelationMatrix,
    RoutingConfig,
    RoutingOutcome,
    alpha_csv_lines,
    compose,
    route,
    routing_entropy,
)
from .synth import Dataset, SynthSpec, dataset_fingerprint, generate, load_dataset, save_dataset, split_dataset
from .tensor import Tape, Tensor
from .training import (
    MetricsRow,
    TrainConfig,
    TrainResult,
    evaluate,
    metrics_csv_lines,
    pretrain_backbone,
    train,
)

__all__ = [
    "AdapterBank",
    "AdapterParams",
    "ApResult",
    "Backbone",
    "CoactivationWeights",
    "ComposedGcn",
    "ComputeCounter",
    "ConfigError",
    "ContractError",
    "Dataset",
    "DimensionError",
    "ForwardResult",
    "GcnLayer",
    "Graph",
    "GraphBatch",
    "GrafterError",
    "IntegrityError",
    "LossReport",
    "MetricsRow",
    "NumericError",
    "ObjectiveConfig",
    "ParamCounts",
    "ParseError",
    "RelationMatrix",
    "RoutingConfig",
    "RoutingOutcome",
    "RunSettings",
    "StateError",
    "SynthSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "adapter_forward",
    "adjacency",
    "alpha_csv_lines",
    "average_precision",
    "awa",
    "bank_forward",
    "beta_from_alpha",
    "compose",
    "consistency_reg",
    "dataset_fingerprint",
    "evaluate",
    "generate",
    "glorot_uniform",
    "layer_forward",
    "load_checkpoint",
    "load_dataset",
    "make_batch",
    "mean_pool",
    "metrics_csv_lines",
    "normalize_adjacency",
    "parse_grid",
    "per_task_loss",
    "predict_probabilities",
    "pretrain_backbone",
    "read_tensors",
    "relation_reg",
    "route",
    "routing_entropy",
    "run_sweep",
    "run_training_job",
    "save_checkpoint",
    "save_dataset",
    "split_dataset",
    "task_loss",
    "total_loss",
    "train",
    "write_tensors",
]
