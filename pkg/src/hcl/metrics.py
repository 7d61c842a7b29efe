"""Accuracy-matrix bookkeeping and the two continual-learning metrics.

a[i, j] is the percent accuracy on task j's test split after finishing
task i (1-based, defined for j <= i). Average accuracy is the mean of the
final row; average forgetting is, per task, the largest drop from its best
to its final accuracy, averaged over T-1.
"""

from __future__ import annotations

import csv

import numpy as np
import torch

from .errors import ContractViolationError, UndefinedMetricError
from .model_zoo import ModelHandle, forward_logits
from .task_stream import TaskStream

EVAL_MODES = ("task_il", "class_il")


class AccuracyMatrix:
    def __init__(self, num_tasks: int, mode: str):
        if mode not in EVAL_MODES:
            raise ContractViolationError(f"unknown eval mode {mode!r}")
        self.num_tasks = num_tasks
        self.mode = mode
        self.values = np.full((num_tasks, num_tasks), np.nan)

    def set_row(self, i: int, accuracies) -> None:
        """Fill row i with accuracies on tasks 1..i. Rows are write-once."""
        accuracies = list(accuracies)
        if len(accuracies) != i:
            raise ContractViolationError(f"row {i} needs {i} entries, got {len(accuracies)}")
        if not np.all(np.isnan(self.values[i - 1, :i])):
            raise ContractViolationError(f"row {i} was already written")
        if any(not 0.0 <= a <= 100.0 for a in accuracies):
            raise ContractViolationError("accuracies must be percentages in [0, 100]")
        self.values[i - 1, :i] = accuracies

    def get(self, i: int, j: int) -> float:
        return float(self.values[i - 1, j - 1])

    def is_complete(self) -> bool:
        return not np.any(np.isnan(self.values[np.tril_indices(self.num_tasks)]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["i", "j", "accuracy"])
            for i in range(1, self.num_tasks + 1):
                for j in range(1, i + 1):
                    if not np.isnan(self.values[i - 1, j - 1]):
                        writer.writerow([i, j, f"{self.values[i - 1, j - 1]:.6g}"])

    @classmethod
    def from_csv(cls, path, mode: str) -> "AccuracyMatrix":
        rows = {}
        with open(path, newline="") as f:
            for record in csv.DictReader(f):
                i, j = int(record["i"]), int(record["j"])
                rows.setdefault(i, {})[j] = float(record["accuracy"])
        matrix = cls(max(rows) if rows else 0, mode)
        for i in sorted(rows):
            matrix.set_row(i, [rows[i][j] for j in range(1, i + 1)])
        return matrix


def masked_predictions(logits: torch.Tensor, class_ids, mode: str) -> torch.Tensor:
    """task_il restricts the argmax to the task's classes; class_il uses all."""
    if mode == "class_il":
        return logits.argmax(dim=1)
    masked = torch.full_like(logits, float("-inf"))
    ids = torch.tensor(list(class_ids), dtype=torch.int64)
    masked[:, ids] = logits[:, ids]
    return masked.argmax(dim=1)


def evaluate(
    model,
    stream: TaskStream,
    upto_t: int,
    mode: str,
    batch_size: int = 512,
    split: str = "test",
) -> list:
    """Percent accuracy on the given split of tasks 1..upto_t. ``model`` is a
    ModelHandle (evaluated in eval mode) or any callable mapping inputs to
    logits."""
    if mode not in EVAL_MODES:
        raise ContractViolationError(f"unknown eval mode {mode!r}")
    if isinstance(model, ModelHandle):
        was_training = model.training
        model.eval_mode()
        logits_fn = lambda x: forward_logits(model, x)
    else:
        was_training = False
        logits_fn = model

    accuracies = []
    with torch.no_grad():
        for t in range(1, upto_t + 1):
            inputs, labels = stream.split(t, split)
            correct = 0
            for start in range(0, inputs.shape[0], batch_size):
                chunk = inputs[start : start + batch_size]
                preds = masked_predictions(logits_fn(chunk), stream.task(t).class_ids, mode)
                correct += int((preds == labels[start : start + batch_size]).sum())
            accuracies.append(100.0 * correct / max(1, inputs.shape[0]))
    if isinstance(model, ModelHandle) and was_training:
        model.train_mode()
    return accuracies


def average_accuracy(matrix: AccuracyMatrix) -> float:
    """Mean of the final row: (1/T) sum_t a[T, t]."""
    final = matrix.values[matrix.num_tasks - 1, : matrix.num_tasks]
    if np.any(np.isnan(final)):
        raise ContractViolationError("final row is incomplete")
    return float(np.mean(final))


def average_forgetting(matrix: AccuracyMatrix) -> float:
    """(1/(T-1)) sum_t max_i (a[i, t] - a[T, t]) over defined i >= t."""
    T = matrix.num_tasks
    if T < 2:
        raise UndefinedMetricError("forgetting is undefined for a single task")
    if not matrix.is_complete():
        raise ContractViolationError("matrix must be complete")
    total = 0.0
    for t in range(1, T + 1):
        column = matrix.values[t - 1 : T, t - 1]
        total += float(np.max(column - matrix.values[T - 1, t - 1]))
    return total / (T - 1)
