"""Sparse networks that grow and prune their connections as new data arrives.

The library builds masked LeNet-style networks on numpy, trains them with
momentum SGD, grows connections from accumulated gradients, prunes them by
magnitude without losing validation accuracy, and drives incremental
experiments against retrain-from-scratch and fine-tuning baselines.
"""

from .engine import (GrowthConfig, PruneConfig, accumulate_gradients, check_recoverable,
                     grow_connections, nonrecoverable_prune, percentile_threshold, prune_step,
                     recoverable_prune)
from .network import NetworkModel, build_model, model_backward, model_forward, sparsity_report
from .orchestrator import (ExperimentSetup, MethodKind, UpdateSchedule, grow_prune_cycle,
                           incremental_update, run_experiment, run_nft, run_tfs)
from .tensor import SgdConfig
from .training import Trainer, evaluate

__version__ = "0.1.0"

__all__ = [
    "GrowthConfig", "PruneConfig", "accumulate_gradients", "check_recoverable", "grow_connections",
    "nonrecoverable_prune", "percentile_threshold", "prune_step", "recoverable_prune",
    "NetworkModel", "build_model", "model_backward", "model_forward", "sparsity_report",
    "ExperimentSetup", "MethodKind", "UpdateSchedule", "grow_prune_cycle", "incremental_update",
    "run_experiment", "run_nft", "run_tfs", "SgdConfig", "Trainer", "evaluate",
]
