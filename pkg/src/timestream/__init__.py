"""Continuous-time latent-interest dynamics for CTR base models."""

from .autodiff import ParameterStore, Tensor, backward, finite_diff_grad, no_grad
from .basemodel import BaseModelConfig, Vocab
from .checkpoint import Checkpoint, TrainConfig, load_checkpoint, model_from_checkpoint, save_checkpoint
from .data import (
    InteractionEvent,
    Sample,
    SyntheticConfig,
    build_samples,
    generate_synthetic,
    normalize_timestamps,
    parse_events,
)
from .metrics import EvalReport, rela_impr, weighted_auc
from .model import ModelConfig, TimeStreamModel, safe_start_init, total_loss
from .ode import (
    ComplexDynamics,
    SimpleDynamics,
    SolverConfig,
    Trajectory,
    extend_trajectory,
    rk4_step,
    solve_trajectory,
)
from .training import Adam, evaluate, predict_at_time, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BaseModelConfig",
    "Checkpoint",
    "ComplexDynamics",
    "EvalReport",
    "InteractionEvent",
    "ModelConfig",
    "ParameterStore",
    "Sample",
    "SimpleDynamics",
    "SolverConfig",
    "SyntheticConfig",
    "Tensor",
    "TimeStreamModel",
    "TrainConfig",
    "Trajectory",
    "Vocab",
    "backward",
    "build_samples",
    "evaluate",
    "extend_trajectory",
    "finite_diff_grad",
    "generate_synthetic",
    "load_checkpoint",
    "model_from_checkpoint",
    "no_grad",
    "normalize_timestamps",
    "parse_events",
    "predict_at_time",
    "rela_impr",
    "rk4_step",
    "safe_start_init",
    "save_checkpoint",
    "solve_trajectory",
    "total_loss",
    "train",
    "weighted_auc",
]
