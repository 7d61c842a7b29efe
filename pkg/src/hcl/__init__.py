"""Continual learning across heterogeneous architecture streams.

Each task may bring a new network; knowledge moves forward through a
modified distillation objective, optionally helped by input-space
inversion of the previous model and/or a small replay buffer.
"""

__version__ = "0.1.0"

from .distillation import KDConfig, kd_loss, smooth_labels, task_loss, total_objective
from .inversion import InversionConfig, SyntheticBatch, synthesize
from .metrics import AccuracyMatrix, average_accuracy, average_forgetting, evaluate
from .model_zoo import ArchitectureSpec, ModelHandle, instantiate, make_spec
from .replay import ReplayBuffer
from .results_io import ExperimentConfig, parse_config
from .task_stream import LabeledBatch, TaskStream, augment, build_split_stream
from .trainer import continual_run, train_task

__all__ = [
    "KDConfig",
    "kd_loss",
    "smooth_labels",
    "task_loss",
    "total_objective",
    "InversionConfig",
    "SyntheticBatch",
    "synthesize",
    "AccuracyMatrix",
    "average_accuracy",
    "average_forgetting",
    "evaluate",
    "ArchitectureSpec",
    "ModelHandle",
    "instantiate",
    "make_spec",
    "ReplayBuffer",
    "ExperimentConfig",
    "parse_config",
    "LabeledBatch",
    "TaskStream",
    "augment",
    "build_split_stream",
    "continual_run",
    "train_task",
]
