"""Gated multi-task learning on a small numpy autodiff engine.

Each layer learns, per channel and per task, whether to read shared or
task-specific features.  A sparsity term pushes the gates toward a compute
budget, and after training the gates collapse into a static pruned network.
"""

from .gates import GateBank, SharedMixer, SparsityConfig, gate_statistics, sparsity_loss
from .metrics import FlopLedger, ScoreTable, count_flops, delta_mtl, mean_rank
from .model import ArchConfig, GatedEncoder, TaskSpec, build_encoder, encoder_forward, predict
from .prune import GatePattern, PrunedModel, collapse, extract_pattern, verify_equivalence
from .tensor import ContractError, DimensionError, NumericError, Tensor
from .train import OptimizerConfig, SweepPlan, fit, run_sweep, train_interrogate

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "ContractError", "DimensionError", "FlopLedger", "GateBank", "GatePattern",
    "GatedEncoder", "NumericError", "OptimizerConfig", "PrunedModel", "ScoreTable", "SharedMixer",
    "SparsityConfig", "SweepPlan", "TaskSpec", "Tensor", "build_encoder", "collapse", "count_flops",
    "delta_mtl", "encoder_forward", "extract_pattern", "fit", "gate_statistics", "mean_rank",
    "predict", "run_sweep", "sparsity_loss", "train_interrogate", "verify_equivalence",
]
