"""Built-in image datasets.

Two datasets ship with the package and need no downloads: ``blobs`` (a
synthetic 10-class color-blob dataset, CIFAR-shaped) and ``digits`` (the
8x8 scikit-learn handwritten digits). ``cifar10`` / ``cifar100`` are read
from a local data directory in the standard python-pickle layout when
available. All loaders return per-channel normalized float tensors; the
normalization constants travel with the bundle so they can be written into
stream descriptors and used for pixel-range clamping.
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError

# Frozen normalization constants per dataset (mean, std per channel).
BLOBS_STATS = ((0.161, 0.161, 0.161), (0.149, 0.149, 0.149))
DIGITS_STATS = ((0.3053,), (0.3760,))
CIFAR10_STATS = ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616))
CIFAR100_STATS = ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762))

# Fixed generation/split seeds: the datasets themselves are immutable;
# only the task partition and val carving depend on the stream seed.
_BLOBS_GEN_SEED = 7321
_DIGITS_SPLIT_SEED = 20240


@dataclass(frozen=True)
class DatasetBundle:
    """A fully materialized dataset in normalized tensor form."""

    dataset_id: str
    train_inputs: torch.Tensor  # N x C x H x W, normalized
    train_labels: torch.Tensor  # N, int64 global class ids
    test_inputs: torch.Tensor
    test_labels: torch.Tensor
    num_classes: int
    mean: tuple
    std: tuple

    @property
    def channels(self) -> int:
        return self.train_inputs.shape[1]

    @property
    def image_size(self) -> tuple:
        return tuple(self.train_inputs.shape[2:])

    def pixel_range(self) -> tuple:
        """(low, high) of the normalized pixel space, per channel, shaped C x 1 x 1."""
        mean = torch.tensor(self.mean).view(-1, 1, 1)
        std = torch.tensor(self.std).view(-1, 1, 1)
        return (0.0 - mean) / std, (1.0 - mean) / std


def _normalize(images: np.ndarray, mean: tuple, std: tuple) -> torch.Tensor:
    x = torch.from_numpy(images.astype(np.float32))
    m = torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
    return (x - m) / s


def _blob_image(rng, centers, palette, label, size):
    """One blob image: class blob + weaker distractor blob from another class.

    The distractor makes classes share visual features, the way natural
    images share low-level structure across categories.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    img = rng.normal(0.0, 1.0, size=(3, size, size)).astype(np.float32) * 0.12

    def add_blob(cls, amplitude):
        cy, cx = centers[cls]
        cy = cy + rng.uniform(-2.0, 2.0)
        cx = cx + rng.uniform(-2.0, 2.0)
        sigma = 3.5 * size / 32.0
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        img[:] += amplitude * palette[cls][:, None, None] * bump[None]

    add_blob(label, rng.uniform(0.75, 0.95))
    distractor = int(rng.integers(0, len(centers)))
    if distractor != label:
        add_blob(distractor, rng.uniform(0.25, 0.4))
    return np.clip(img + 0.1, 0.0, 1.0)


def _generate_blobs(num_classes=10, size=32, train_per_class=400, test_per_class=100):
    rng = np.random.default_rng(_BLOBS_GEN_SEED)
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    radius = size * 0.31
    centers = np.stack(
        [size / 2 + radius * np.sin(angles), size / 2 + radius * np.cos(angles)], axis=1
    )
    hues = np.linspace(0.0, 1.0, num_classes, endpoint=False)
    palette = np.stack(
        [
            0.5 + 0.5 * np.cos(2 * np.pi * (hues + shift))
            for shift in (0.0, 1.0 / 3.0, 2.0 / 3.0)
        ],
        axis=1,
    ).astype(np.float32)
    palette = 0.25 + 0.75 * palette

    def make(n_per_class):
        images, labels = [], []
        for cls in range(num_classes):
            for _ in range(n_per_class):
                images.append(_blob_image(rng, centers, palette, cls, size))
                labels.append(cls)
        return np.stack(images), np.asarray(labels, dtype=np.int64)

    return make(train_per_class), make(test_per_class)


_BLOBS_CACHE = {}


def _load_blobs() -> DatasetBundle:
    if "bundle" not in _BLOBS_CACHE:
        (train_x, train_y), (test_x, test_y) = _generate_blobs()
        mean, std = BLOBS_STATS
        _BLOBS_CACHE["bundle"] = DatasetBundle(
            dataset_id="blobs",
            train_inputs=_normalize(train_x, mean, std),
            train_labels=torch.from_numpy(train_y),
            test_inputs=_normalize(test_x, mean, std),
            test_labels=torch.from_numpy(test_y),
            num_classes=10,
            mean=mean,
            std=std,
        )
    return _BLOBS_CACHE["bundle"]


def _load_digits() -> DatasetBundle:
    from sklearn.datasets import load_digits

    data = load_digits()
    images = (data.images / 16.0)[:, None, :, :]  # N x 1 x 8 x 8 in [0, 1]
    labels = data.target.astype(np.int64)

    # Stratified 80/20 train/test split, fixed so the dataset identity is
    # stable across stream seeds.
    rng = np.random.default_rng(_DIGITS_SPLIT_SEED)
    train_idx, test_idx = [], []
    for cls in range(10):
        idx = np.flatnonzero(labels == cls)
        idx = rng.permutation(idx)
        n_test = int(round(0.2 * len(idx)))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    train_idx = np.asarray(sorted(train_idx))
    test_idx = np.asarray(sorted(test_idx))

    mean, std = DIGITS_STATS
    return DatasetBundle(
        dataset_id="digits",
        train_inputs=_normalize(images[train_idx], mean, std),
        train_labels=torch.from_numpy(labels[train_idx]),
        test_inputs=_normalize(images[test_idx], mean, std),
        test_labels=torch.from_numpy(labels[test_idx]),
        num_classes=10,
        mean=mean,
        std=std,
    )


def _read_cifar_batch(path, labels_key=b"labels"):
    with open(path, "rb") as f:
        entry = pickle.load(f, encoding="bytes")
    data = entry[b"data"].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return data, np.asarray(entry[labels_key], dtype=np.int64)


def _load_cifar10(data_dir) -> DatasetBundle:
    root = os.path.join(data_dir, "cifar-10-batches-py")
    if not os.path.isdir(root):
        raise ConfigurationError(
            f"cifar10 requires the 'cifar-10-batches-py' directory under {data_dir!r}"
        )
    train_parts = [_read_cifar_batch(os.path.join(root, f"data_batch_{i}")) for i in range(1, 6)]
    train_x = np.concatenate([p[0] for p in train_parts])
    train_y = np.concatenate([p[1] for p in train_parts])
    test_x, test_y = _read_cifar_batch(os.path.join(root, "test_batch"))
    mean, std = CIFAR10_STATS
    return DatasetBundle(
        dataset_id="cifar10",
        train_inputs=_normalize(train_x, mean, std),
        train_labels=torch.from_numpy(train_y),
        test_inputs=_normalize(test_x, mean, std),
        test_labels=torch.from_numpy(test_y),
        num_classes=10,
        mean=mean,
        std=std,
    )


def _load_cifar100(data_dir) -> DatasetBundle:
    root = os.path.join(data_dir, "cifar-100-python")
    if not os.path.isdir(root):
        raise ConfigurationError(
            f"cifar100 requires the 'cifar-100-python' directory under {data_dir!r}"
        )
    train_x, train_y = _read_cifar_batch(os.path.join(root, "train"), b"fine_labels")
    test_x, test_y = _read_cifar_batch(os.path.join(root, "test"), b"fine_labels")
    mean, std = CIFAR100_STATS
    return DatasetBundle(
        dataset_id="cifar100",
        train_inputs=_normalize(train_x, mean, std),
        train_labels=torch.from_numpy(train_y),
        test_inputs=_normalize(test_x, mean, std),
        test_labels=torch.from_numpy(test_y),
        num_classes=100,
        mean=mean,
        std=std,
    )


def get_dataset(dataset_id: str, data_dir: str | None = None) -> DatasetBundle:
    """Load a dataset by id. Unknown ids raise a configuration error."""
    if dataset_id == "blobs":
        return _load_blobs()
    if dataset_id == "digits":
        return _load_digits()
    data_dir = data_dir or os.environ.get("HCL_DATA_DIR", "")
    if dataset_id == "cifar10":
        return _load_cifar10(data_dir)
    if dataset_id == "cifar100":
        return _load_cifar100(data_dir)
    raise ConfigurationError(f"unknown dataset id {dataset_id!r}")
