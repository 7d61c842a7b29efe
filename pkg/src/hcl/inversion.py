"""Synthesis of prior-task examples by optimizing inputs against a frozen model.

Two init modes: ``gaussian`` starts from noise (the slow classic), and
``current_batch`` starts from the current task's images, which converges in
a fraction of the steps and blends current- and prior-task features. The
optimization drives the frozen previous model's prediction toward sampled
prior-task classes under image priors (total variation, L2 magnitude) and
feature-distribution matching against the model's normalization statistics.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, ContractViolationError
from .model_zoo import (
    FeatureStats,
    ModelHandle,
    approximate_feature_stats,
    collect_running_stats,
    forward_logits,
    forward_with_stats,
)
from .task_stream import TaskStream

INIT_MODES = ("gaussian", "current_batch")
STATS_SOURCES = ("auto", "running", "approximate")


@dataclass
class InversionConfig:
    """Optimization hyper-parameters for input-space synthesis."""

    k: int = 50  # gradient steps
    lr: float = 0.05
    alpha_tv: float = 0.001
    alpha_l2: float = 0.0
    alpha_feature: float = 0.1
    init_mode: str = "current_batch"
    stats_source: str = "auto"
    batch_size: int = 32  # used when no current batch fixes the size

    def validate(self) -> None:
        if self.k < 0:
            raise ConfigurationError(f"inversion.k must be >= 0, got {self.k}")
        if self.k > 0 and self.lr <= 0.0:
            raise ConfigurationError(f"inversion.lr must be > 0 when k > 0, got {self.lr}")
        for key in ("alpha_tv", "alpha_l2", "alpha_feature"):
            if getattr(self, key) < 0.0:
                raise ConfigurationError(f"inversion.{key} must be >= 0")
        if self.init_mode not in INIT_MODES:
            raise ConfigurationError(f"inversion.init_mode must be one of {INIT_MODES}")
        if self.stats_source not in STATS_SOURCES:
            raise ConfigurationError(f"inversion.stats_source must be one of {STATS_SOURCES}")
        if self.batch_size < 1:
            raise ConfigurationError(f"inversion.batch_size must be >= 1")


@dataclass
class SyntheticBatch:
    """Optimized inputs labeled with the prior-task classes they were driven to."""

    inputs: torch.Tensor
    targets: torch.Tensor
    steps_used: int
    loss_trace: list


def tv_loss(images: torch.Tensor) -> torch.Tensor:
    """Mean squared difference of horizontal plus vertical pixel neighbors."""
    if images.shape[-1] < 2 or images.shape[-2] < 2:
        raise ConfigurationError("total variation needs spatial dims >= 2")
    dh = images[..., :, 1:] - images[..., :, :-1]
    dv = images[..., 1:, :] - images[..., :-1, :]
    return (dh**2).mean() + (dv**2).mean()


def l2_loss(images: torch.Tensor) -> torch.Tensor:
    """Mean squared pixel magnitude."""
    return (images**2).mean()


def feature_distance(means, variances, target_stats: FeatureStats) -> torch.Tensor:
    """Sum over layers of MSE(mean, target mean) + MSE(var, target var)."""
    total = 0.0
    for mean, var, t_mean, t_var in zip(
        means, variances, target_stats.means, target_stats.variances
    ):
        total = total + ((mean - t_mean) ** 2).mean() + ((var - t_var) ** 2).mean()
    return total


def feature_stat_loss(
    teacher: ModelHandle, images: torch.Tensor, target_stats: FeatureStats
) -> torch.Tensor:
    """Distance between the batch's feature statistics and the target statistics."""
    _, stats = forward_with_stats(teacher, images)
    stats.check_aligned(target_stats)
    return feature_distance(stats.means, stats.variances, target_stats)


def sample_prior_targets(
    stream: TaskStream, t: int, batch_size: int, seed: int
) -> torch.Tensor:
    """Class targets drawn evenly across tasks 1..t-1, shuffled."""
    if t < 2:
        raise ContractViolationError(f"prior-target sampling needs t >= 2, got t={t}")
    rng = np.random.default_rng(seed)
    n_prior = t - 1
    base, extra = divmod(batch_size, n_prior)
    # Which tasks receive one extra sample is itself drawn uniformly.
    bonus = set(rng.choice(n_prior, size=extra, replace=False).tolist())
    labels = []
    for prior in range(n_prior):
        count = base + (1 if prior in bonus else 0)
        class_ids = stream.task(prior + 1).class_ids
        labels.extend(rng.choice(class_ids, size=count).tolist())
    labels = np.array(labels, dtype=np.int64)
    rng.shuffle(labels)
    return torch.from_numpy(labels)


def resolve_target_stats(
    teacher: ModelHandle, cfg: InversionConfig, current_batch: torch.Tensor | None
) -> FeatureStats | None:
    """Pick the statistics target: running stats when the teacher has them,
    otherwise batch statistics of the current task batch through the teacher."""
    if cfg.alpha_feature == 0.0:
        return None
    source = cfg.stats_source
    if source == "auto":
        source = "running" if teacher.spec.has_running_stats else "approximate"
    if source == "running":
        return collect_running_stats(teacher)
    if current_batch is None:
        raise ConfigurationError(
            "stats_source=approximate needs a current batch to estimate from"
        )
    return approximate_feature_stats(teacher, current_batch)


def synthesize(
    teacher: ModelHandle,
    current_batch: torch.Tensor | None,
    stream: TaskStream,
    t: int,
    cfg: InversionConfig,
    seed: int,
) -> SyntheticBatch:
    """Run ``cfg.k`` gradient steps on the inputs only; the teacher is untouched.

    The objective is cross-entropy toward sampled prior classes plus the
    weighted image priors and feature-statistic distance. Pixels are
    clamped to the normalized input range after every step. loss_trace[i]
    is the total loss evaluated before step i.
    """
    cfg.validate()
    if teacher.training:
        raise ContractViolationError("teacher must be frozen in eval mode for synthesis")
    if cfg.init_mode == "current_batch":
        if current_batch is None:
            raise ConfigurationError("init_mode=current_batch requires a current batch")
        inputs = current_batch.detach().clone()
    else:
        n = current_batch.shape[0] if current_batch is not None else cfg.batch_size
        gen = torch.Generator().manual_seed(seed)
        inputs = torch.randn((n, *stream.input_shape), generator=gen)

    targets = sample_prior_targets(stream, t, inputs.shape[0], seed)
    if cfg.k == 0:
        return SyntheticBatch(inputs, targets, 0, [])

    target_stats = resolve_target_stats(teacher, cfg, current_batch)
    low, high = stream.pixel_range()

    inputs.requires_grad_(True)
    optimizer = torch.optim.Adam([inputs], lr=cfg.lr)
    trace = []
    for _ in range(cfg.k):
        optimizer.zero_grad()
        if target_stats is not None:
            logits, stats = forward_with_stats(teacher, inputs)
            stats.check_aligned(target_stats)
            feat = feature_distance(stats.means, stats.variances, target_stats)
        else:
            logits = forward_logits(teacher, inputs)
            feat = None
        loss = torch.nn.functional.cross_entropy(logits, targets)
        if cfg.alpha_tv > 0.0:
            loss = loss + cfg.alpha_tv * tv_loss(inputs)
        if cfg.alpha_l2 > 0.0:
            loss = loss + cfg.alpha_l2 * l2_loss(inputs)
        if feat is not None:
            loss = loss + cfg.alpha_feature * feat
        trace.append(float(loss.detach()))
        loss.backward()
        optimizer.step()
        with torch.no_grad():
            inputs.clamp_(low, high)

    return SyntheticBatch(inputs.detach().clone(), targets, cfg.k, trace)


def synthesis_cache_key(t: int, seed: int, cfg: InversionConfig) -> str:
    text = f"{t}:{seed}:{cfg.k}:{cfg.lr}:{cfg.alpha_tv}:{cfg.alpha_l2}:{cfg.alpha_feature}:{cfg.init_mode}:{cfg.stats_source}:{cfg.batch_size}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def synthesize_cached(
    teacher: ModelHandle,
    current_batch: torch.Tensor | None,
    stream: TaskStream,
    t: int,
    cfg: InversionConfig,
    seed: int,
    cache_dir: str | None = None,
) -> SyntheticBatch:
    """Synthesize once per (task, seed, config); reuse the cached batch after."""
    if cache_dir is None:
        return synthesize(teacher, current_batch, stream, t, cfg, seed)
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"t{t:02d}_{synthesis_cache_key(t, seed, cfg)}.pt")
    if os.path.exists(path):
        payload = torch.load(path, weights_only=False)
        return SyntheticBatch(**payload)
    batch = synthesize(teacher, current_batch, stream, t, cfg, seed)
    torch.save(
        {
            "inputs": batch.inputs,
            "targets": batch.targets,
            "steps_used": batch.steps_used,
            "loss_trace": batch.loss_trace,
        },
        path,
    )
    return batch


def dump_image_grid(batch: SyntheticBatch, stream: TaskStream, path) -> None:
    """Save the synthesized batch as one de-normalized PNG grid for inspection."""
    from PIL import Image

    mean = torch.tensor(stream.mean).view(1, -1, 1, 1)
    std = torch.tensor(stream.std).view(1, -1, 1, 1)
    images = (batch.inputs * std + mean).clamp(0.0, 1.0)

    n, c, h, w = images.shape
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.ones((rows * (h + 2), cols * (w + 2), 3), dtype=np.float32)
    for i in range(n):
        r, col = divmod(i, cols)
        tile = images[i].numpy()
        if c == 1:
            tile = np.repeat(tile, 3, axis=0)
        grid[r * (h + 2) + 1 : r * (h + 2) + 1 + h, col * (w + 2) + 1 : col * (w + 2) + 1 + w] = (
            tile.transpose(1, 2, 0)
        )
    Image.fromarray((grid * 255).astype(np.uint8)).save(path)
