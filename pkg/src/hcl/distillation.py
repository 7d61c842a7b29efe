"""Label-smoothed task loss plus temperature-scaled distillation.

The training objective is the task cross-entropy on smoothed targets plus
a weighted distillation term between the current model and the frozen
previous one, computed on the *same* augmented view for both. Optional
extra terms: distillation on synthesized prior-task examples and a plain
classification term on replayed samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolationError, ShapeError
from .model_zoo import ModelHandle, forward_logits
from .task_stream import LabeledBatch

KL_DIRECTIONS = ("student_to_teacher", "teacher_to_student")
DISTANCES = ("kl", "ce", "mse")


@dataclass
class KDConfig:
    """Scalar knobs of the distillation objective."""

    psi: float = 0.1  # label-smoothing mixture
    tau: float = 1.0  # softmax temperature
    alpha: float = 1.0  # weight of the task-batch distillation term
    beta: float = 1.0  # weight of the synthetic-batch distillation term
    kl_direction: str = "student_to_teacher"
    distance: str = "kl"

    def validate(self) -> None:
        if not 0.0 <= self.psi < 1.0:
            raise ConfigurationError(f"kd.psi must be in [0, 1), got {self.psi}")
        if self.tau <= 0.0:
            raise ConfigurationError(f"kd.tau must be > 0, got {self.tau}")
        if self.alpha < 0.0:
            raise ConfigurationError(f"kd.alpha must be >= 0, got {self.alpha}")
        if self.beta < 0.0:
            raise ConfigurationError(f"kd.beta must be >= 0, got {self.beta}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigurationError(f"kd.direction must be one of {KL_DIRECTIONS}")
        if self.distance not in DISTANCES:
            raise ConfigurationError(f"kd.distance must be one of {DISTANCES}")


def smooth_labels(labels: torch.Tensor, psi: float, num_classes: int) -> torch.Tensor:
    """Mix one-hot targets with the uniform distribution: y*(1-psi) + psi/C."""
    if not 0.0 <= psi < 1.0:
        raise ConfigurationError(f"label smoothing psi must be in [0, 1), got {psi}")
    if labels.numel() and int(labels.max()) >= num_classes:
        raise ConfigurationError(
            f"label {int(labels.max())} out of range for {num_classes} classes"
        )
    targets = torch.full((labels.shape[0], num_classes), psi / num_classes)
    targets[torch.arange(labels.shape[0]), labels] += 1.0 - psi
    return targets


def task_loss(logits: torch.Tensor, soft_targets: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between softmax(logits) and soft targets, batch mean."""
    if logits.shape != soft_targets.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs targets {tuple(soft_targets.shape)}")
    row_sums = soft_targets.sum(dim=1)
    if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=1e-4):
        raise ContractViolationError("soft_targets rows must sum to 1")
    return -(soft_targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def kd_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    tau: float,
    direction: str = "student_to_teacher",
    distance: str = "kl",
) -> torch.Tensor:
    """Distance between temperature-softened output distributions.

    kl: batch-mean KL in the given direction, scaled by tau^2 so the
    gradient magnitude is temperature-invariant. ce: cross-entropy from
    the teacher's softened distribution to the student's, offset by the
    teacher entropy so identical logits give exactly 0 (the offset is
    constant w.r.t. the student, so gradients match plain cross-entropy).
    mse: mean squared difference of the softened probabilities.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(
            f"student {tuple(student_logits.shape)} vs teacher {tuple(teacher_logits.shape)}"
        )
    if tau <= 0.0:
        raise ConfigurationError(f"temperature must be > 0, got {tau}")
    if direction not in KL_DIRECTIONS:
        raise ConfigurationError(f"unknown KL direction {direction!r}")

    log_p_s = F.log_softmax(student_logits / tau, dim=1)
    log_p_t = F.log_softmax(teacher_logits / tau, dim=1)

    if distance == "kl":
        if direction == "student_to_teacher":
            kl = (log_p_s.exp() * (log_p_s - log_p_t)).sum(dim=1)
        else:
            kl = (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=1)
        return kl.mean() * tau**2
    if distance == "ce":
        return (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=1).mean()
    if distance == "mse":
        return ((log_p_s.exp() - log_p_t.exp()) ** 2).mean()
    raise ConfigurationError(f"unknown distillation distance {distance!r}")


def total_objective(
    task_batch: LabeledBatch,
    student: ModelHandle,
    teacher: ModelHandle | None,
    synthetic_batch=None,
    buffer_batch: LabeledBatch | None = None,
    cfg: KDConfig | None = None,
    num_classes: int | None = None,
):
    """Full training objective for one step.

    task_batch must already be the augmented view; the same tensor is fed
    to the student and the teacher (consistent teaching). Returns the loss
    and a breakdown dict holding only the components that were active,
    each as an unweighted float (weights live in the config).

    Breakdown keys: task, kd, kd_synth, replay, total.
    """
    cfg = cfg or KDConfig()
    num_classes = num_classes or student.output_dim
    if teacher is not None and teacher.training:
        raise ContractViolationError("teacher must be frozen in eval mode")

    breakdown = {}
    student_logits = forward_logits(student, task_batch.inputs)
    targets = smooth_labels(task_batch.labels, cfg.psi, num_classes)
    total = task = task_loss(student_logits, targets)
    breakdown["task"] = float(task.detach())

    if teacher is not None and cfg.alpha > 0.0:
        with torch.no_grad():
            teacher_logits = forward_logits(teacher, task_batch.inputs)
        kd = kd_loss(student_logits, teacher_logits, cfg.tau, cfg.kl_direction, cfg.distance)
        total = total + cfg.alpha * kd
        breakdown["kd"] = float(kd.detach())

    if synthetic_batch is not None and teacher is not None and cfg.beta > 0.0:
        synth_student = forward_logits(student, synthetic_batch.inputs)
        with torch.no_grad():
            synth_teacher = forward_logits(teacher, synthetic_batch.inputs)
        kd_synth = kd_loss(synth_student, synth_teacher, cfg.tau, cfg.kl_direction, cfg.distance)
        total = total + cfg.beta * kd_synth
        breakdown["kd_synth"] = float(kd_synth.detach())

    if buffer_batch is not None and len(buffer_batch) > 0:
        replay_logits = forward_logits(student, buffer_batch.inputs)
        replay_targets = smooth_labels(buffer_batch.labels, cfg.psi, num_classes)
        replay = task_loss(replay_logits, replay_targets)
        total = total + replay
        breakdown["replay"] = float(replay.detach())

    breakdown["total"] = float(total.detach())
    return total, breakdown
