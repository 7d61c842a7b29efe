"""Class-partitioned task sequences with deterministic augmentation views.

A stream splits a dataset's classes into disjoint tasks, each with
train/val/test tensors kept in memory (everything here is desk-scale).
Augmentation is a pure function of (batch, policy, view_seed) so the exact
same view can be fed to a student and a frozen teacher.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .datasets import DatasetBundle, get_dataset
from .errors import ConfigurationError

AUGMENT_POLICIES = ("none", "crop_flip")
_CROP_PAD = 4


@dataclass(frozen=True)
class TaskSpec:
    """Metadata for one task: which global classes it holds and split sizes."""

    task_index: int  # 1-based
    class_ids: tuple
    n_train: int
    n_val: int
    n_test: int


@dataclass
class LabeledBatch:
    """A batch of normalized inputs with global class labels."""

    inputs: torch.Tensor  # N x C x H x W
    labels: torch.Tensor  # N, int64
    view_seed: int = 0

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class TaskStream:
    """An ordered sequence of class-disjoint tasks over one dataset.

    Read-only after construction. ``splits[t]`` maps "train"/"val"/"test"
    to (inputs, labels) tensors for 1-based task index t.
    """

    dataset_id: str
    seed: int
    total_classes: int
    tasks: list
    splits: dict = field(repr=False)
    mean: tuple = ()
    std: tuple = ()
    build_params: dict = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def channels(self) -> int:
        return self.splits[1]["train"][0].shape[1]

    @property
    def input_shape(self) -> tuple:
        return tuple(self.splits[1]["train"][0].shape[1:])

    def task(self, t: int) -> TaskSpec:
        return self.tasks[t - 1]

    def split(self, t: int, name: str) -> tuple:
        return self.splits[t][name]

    def pixel_range(self) -> tuple:
        mean = torch.tensor(self.mean).view(-1, 1, 1)
        std = torch.tensor(self.std).view(-1, 1, 1)
        return (0.0 - mean) / std, (1.0 - mean) / std

    def classes_up_to(self, t: int) -> list:
        """Global class ids of tasks 1..t in task order."""
        out = []
        for spec in self.tasks[:t]:
            out.extend(spec.class_ids)
        return out


def _take_per_class(inputs, labels, class_ids, per_class_cap, rng):
    """Indices of samples belonging to class_ids, optionally capped per class."""
    picked = []
    for cls in class_ids:
        idx = torch.nonzero(labels == cls, as_tuple=True)[0].numpy()
        if per_class_cap and len(idx) > per_class_cap:
            idx = rng.permutation(idx)[:per_class_cap]
        picked.append(np.sort(idx))
    return np.concatenate(picked)


def build_split_stream(
    dataset_id: str,
    num_tasks: int,
    classes_per_task: int,
    seed: int,
    *,
    data_dir: str | None = None,
    val_fraction: float = 0.1,
    max_train_per_class: int = 0,
    max_test_per_class: int = 0,
) -> TaskStream:
    """Partition a dataset's classes into ``num_tasks`` disjoint tasks.

    The class order is a seeded shuffle of the natural label order; 10% of
    each task's training data (by default) is held out for validation-based
    model selection. Same arguments -> identical partition and identical
    sample-to-split assignment.
    """
    bundle = get_dataset(dataset_id, data_dir)
    needed = num_tasks * classes_per_task
    if needed > bundle.num_classes:
        raise ConfigurationError(
            f"{dataset_id!r} has {bundle.num_classes} classes; "
            f"{num_tasks} x {classes_per_task} = {needed} requested"
        )

    rng = np.random.default_rng(seed)
    class_order = rng.permutation(bundle.num_classes)[:needed]

    tasks, splits = [], {}
    for t in range(1, num_tasks + 1):
        class_ids = tuple(int(c) for c in class_order[(t - 1) * classes_per_task : t * classes_per_task])

        train_idx = _take_per_class(
            bundle.train_inputs, bundle.train_labels, class_ids, max_train_per_class, rng
        )
        test_idx = _take_per_class(
            bundle.test_inputs, bundle.test_labels, class_ids, max_test_per_class, rng
        )

        train_idx = rng.permutation(train_idx)
        n_val = max(1, int(round(val_fraction * len(train_idx)))) if val_fraction > 0 else 0
        val_idx, train_idx = train_idx[:n_val], train_idx[n_val:]

        splits[t] = {
            "train": (bundle.train_inputs[train_idx], bundle.train_labels[train_idx]),
            "val": (bundle.train_inputs[val_idx], bundle.train_labels[val_idx]),
            "test": (bundle.test_inputs[test_idx], bundle.test_labels[test_idx]),
        }
        tasks.append(
            TaskSpec(
                task_index=t,
                class_ids=class_ids,
                n_train=len(train_idx),
                n_val=n_val,
                n_test=len(test_idx),
            )
        )

    return TaskStream(
        dataset_id=dataset_id,
        seed=seed,
        total_classes=bundle.num_classes,
        tasks=tasks,
        splits=splits,
        mean=bundle.mean,
        std=bundle.std,
        build_params={
            "dataset_id": dataset_id,
            "num_tasks": num_tasks,
            "classes_per_task": classes_per_task,
            "seed": seed,
            "val_fraction": val_fraction,
            "max_train_per_class": max_train_per_class,
            "max_test_per_class": max_test_per_class,
        },
    )


def augment(batch: LabeledBatch, policy: str, view_seed: int) -> LabeledBatch:
    """Apply a stochastic augmentation view, deterministically per seed.

    ``crop_flip`` is pad-4 random crop plus per-sample horizontal flip.
    Labels are untouched; output shape equals input shape; two calls with
    the same (batch, policy, view_seed) are bit-identical.
    """
    if policy not in AUGMENT_POLICIES:
        raise ConfigurationError(f"unknown augmentation policy {policy!r}")
    if policy == "none":
        return LabeledBatch(batch.inputs, batch.labels, view_seed)

    n, _, h, w = batch.inputs.shape
    rng = np.random.default_rng(view_seed)
    offsets = rng.integers(0, 2 * _CROP_PAD + 1, size=(n, 2))
    flips = rng.random(n) < 0.5

    padded = torch.nn.functional.pad(batch.inputs, (_CROP_PAD,) * 4)
    out = torch.empty_like(batch.inputs)
    for i in range(n):
        dy, dx = int(offsets[i, 0]), int(offsets[i, 1])
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = torch.flip(crop, dims=[-1]) if flips[i] else crop
    return LabeledBatch(out, batch.labels, view_seed)


def save_stream_descriptor(stream: TaskStream, path) -> None:
    """Write the stream descriptor (build params + realized partition) as JSON."""
    payload = {
        "format_version": 1,
        "build_params": stream.build_params,
        "mean": list(stream.mean),
        "std": list(stream.std),
        "total_classes": stream.total_classes,
        "tasks": [
            {
                "task_index": spec.task_index,
                "class_ids": list(spec.class_ids),
                "n_train": spec.n_train,
                "n_val": spec.n_val,
                "n_test": spec.n_test,
            }
            for spec in stream.tasks
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)


def load_stream_from_descriptor(path, data_dir: str | None = None) -> TaskStream:
    """Rebuild a stream from its descriptor and verify the partition matches."""
    with open(path) as f:
        payload = json.load(f)
    params = dict(payload["build_params"])
    params.pop("dataset_id", None)
    stream = build_split_stream(
        payload["build_params"]["dataset_id"], data_dir=data_dir, **params
    )
    recorded = [tuple(task["class_ids"]) for task in payload["tasks"]]
    actual = [spec.class_ids for spec in stream.tasks]
    if recorded != actual:
        raise ConfigurationError(
            f"descriptor {path!r} does not match the rebuilt stream partition"
        )
    return stream
