"""Heterogeneous architecture registry behind one uniform model interface.

Builders range from a tiny single-conv net to a residual CNN so a stream
can swap architectures per task. Every model exposes logits over all
``output_dim`` global classes, a flat parameter view, and per-layer
normalization statistics (batch-norm running stats when the architecture
has them, otherwise batch statistics of post-convolution feature maps).
"""

from __future__ import annotations

import dataclasses
import gc
import hashlib
import weakref
from dataclasses import dataclass

import torch
from torch import nn

from .errors import (
    ConfigurationError,
    ShapeError,
    UnsupportedArchitectureError,
)

CHECKPOINT_FORMAT_VERSION = 1

_LIVE_MODELS = weakref.WeakSet()


@dataclass(frozen=True)
class ArchitectureSpec:
    """Recipe for one model in the stream. Equal specs build identical shapes."""

    name: str
    builder_id: str
    width: int
    depth: int = 0
    in_channels: int = 3
    has_running_stats: bool = False


@dataclass
class FeatureStats:
    """Per-layer channel means and variances, aligned by layer id."""

    layer_ids: tuple
    means: list
    variances: list

    def check_aligned(self, other: "FeatureStats") -> None:
        from .errors import ContractViolationError

        if self.layer_ids != other.layer_ids:
            raise ContractViolationError(
                f"feature-stat layers do not align: {self.layer_ids} vs {other.layer_ids}"
            )


class ModelHandle:
    """A live model plus its spec; the uniform surface the rest of the code uses."""

    def __init__(self, spec: ArchitectureSpec, module: nn.Module, output_dim: int):
        self.spec = spec
        self.module = module
        self.output_dim = output_dim
        self.module.eval()
        _LIVE_MODELS.add(self)

    @property
    def training(self) -> bool:
        return self.module.training

    def train_mode(self) -> "ModelHandle":
        self.module.train()
        return self

    def eval_mode(self) -> "ModelHandle":
        self.module.eval()
        return self

    def parameter_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.module.parameters()])

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def state_hash(self) -> str:
        """Hash over parameters and buffers (covers running stats)."""
        h = hashlib.sha256()
        for key, value in sorted(self.module.state_dict().items()):
            h.update(key.encode())
            h.update(value.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def live_model_count() -> int:
    """Number of ModelHandles currently alive (used by the memory audit)."""
    gc.collect()
    return len(_LIVE_MODELS)


class _TinyConv(nn.Module):
    """Single bias-free conv + pooled linear head; the toy teacher."""

    def __init__(self, in_channels, width, output_dim):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, width, 5, padding=2, bias=False)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(width, output_dim)

    def forward(self, x):
        x = torch.relu(self.conv(x))
        x = self.pool(x).flatten(1)
        return self.head(x)


class _SmallCNN(nn.Module):
    """LeNet-style two-conv net, no normalization layers."""

    def __init__(self, in_channels, width, output_dim):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 5, padding=2),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 5, padding=2),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.classifier = nn.Sequential(
            nn.Linear(2 * width * 16, 10 * width),
            nn.ReLU(),
        )
        self.head = nn.Linear(10 * width, output_dim)

    def forward(self, x):
        x = self.features(x).flatten(1)
        return self.head(self.classifier(x))


class _MidCNN(nn.Module):
    """Two conv-BN stages with pooling; the middle rung of the ladder."""

    def __init__(self, in_channels, width, output_dim):
        super().__init__()

        def stage(c_in, c_out):
            return [
                nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(),
                nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(),
                nn.MaxPool2d(2),
            ]

        self.features = nn.Sequential(
            *stage(in_channels, width), *stage(width, 2 * width), nn.AdaptiveAvgPool2d(1)
        )
        self.head = nn.Linear(2 * width, output_dim)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


class _ResidualBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(c_out),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class _ResidCNN(nn.Module):
    """Small residual network: stem, ``depth`` residual blocks, pooled head."""

    def __init__(self, in_channels, width, depth, output_dim):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(),
        )
        blocks, channels = [], width
        for i in range(depth):
            if i == 1:
                blocks.append(_ResidualBlock(channels, 2 * channels, stride=2))
                channels *= 2
            else:
                blocks.append(_ResidualBlock(channels, channels))
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(channels, output_dim)

    def forward(self, x):
        x = self.blocks(self.stem(x))
        return self.head(self.pool(x).flatten(1))


# builder_id -> (constructor, has_running_stats)
_BUILDERS = {
    "tiny_conv": (lambda s, d: _TinyConv(s.in_channels, s.width, d), False),
    "small_cnn": (lambda s, d: _SmallCNN(s.in_channels, s.width, d), False),
    "mid_cnn": (lambda s, d: _MidCNN(s.in_channels, s.width, d), True),
    "resid_cnn": (lambda s, d: _ResidCNN(s.in_channels, s.width, max(s.depth, 1), d), True),
}

# Named presets in increasing capacity order (schedules refer to these).
_PRESETS = {
    "tiny_conv": dict(builder_id="tiny_conv", width=8),
    "small_cnn": dict(builder_id="small_cnn", width=6),
    "wide_cnn": dict(builder_id="small_cnn", width=12),
    "mid_cnn": dict(builder_id="mid_cnn", width=20),
    "resid_cnn": dict(builder_id="resid_cnn", width=24, depth=3),
    "wide_resid_cnn": dict(builder_id="resid_cnn", width=40, depth=3),
}


def preset_names() -> list:
    return list(_PRESETS)


def make_spec(name: str, in_channels: int = 3, **overrides) -> ArchitectureSpec:
    """Build an ArchitectureSpec from a preset name."""
    if name not in _PRESETS:
        raise ConfigurationError(
            f"unknown architecture preset {name!r}; choose from {sorted(_PRESETS)}"
        )
    params = dict(_PRESETS[name])
    params.update(overrides)
    builder_id = params["builder_id"]
    return ArchitectureSpec(
        name=name,
        builder_id=builder_id,
        width=params["width"],
        depth=params.get("depth", 0),
        in_channels=in_channels,
        has_running_stats=_BUILDERS[builder_id][1],
    )


def instantiate(spec: ArchitectureSpec, output_dim: int, seed: int) -> ModelHandle:
    """Freshly initialize a model; deterministic given (spec, output_dim, seed)."""
    if spec.builder_id not in _BUILDERS:
        raise ConfigurationError(f"unknown architecture builder {spec.builder_id!r}")
    if output_dim < 2:
        raise ConfigurationError(f"output_dim must be >= 2, got {output_dim}")
    builder, has_stats = _BUILDERS[spec.builder_id]
    if spec.has_running_stats != has_stats:
        raise ConfigurationError(
            f"spec {spec.name!r} declares has_running_stats={spec.has_running_stats} "
            f"but builder {spec.builder_id!r} provides {has_stats}"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = builder(spec, output_dim)
    return ModelHandle(spec, module, output_dim)


def forward_logits(model: ModelHandle, inputs: torch.Tensor) -> torch.Tensor:
    """Logits over all global classes; differentiable w.r.t. params and inputs."""
    if inputs.dim() != 4 or inputs.shape[1] != model.spec.in_channels:
        raise ShapeError(
            f"expected N x {model.spec.in_channels} x H x W inputs, got {tuple(inputs.shape)}"
        )
    return model.module(inputs)


def _stat_points(module: nn.Module) -> list:
    """Instrumented layers: BN inputs when BN exists, else conv outputs."""
    bns = [(n, m) for n, m in module.named_modules() if isinstance(m, nn.BatchNorm2d)]
    if bns:
        return [(n, m, "bn_input") for n, m in bns]
    convs = [(n, m) for n, m in module.named_modules() if isinstance(m, nn.Conv2d)]
    return [(n, m, "conv_output") for n, m in convs]


def collect_running_stats(model: ModelHandle) -> FeatureStats:
    """Batch-norm running mean/var per normalized layer."""
    if not model.spec.has_running_stats:
        raise UnsupportedArchitectureError(
            f"{model.spec.name!r} keeps no running statistics; "
            "use approximate_feature_stats with a reference batch"
        )
    ids, means, variances = [], [], []
    for name, bn, _ in _stat_points(model.module):
        ids.append(name)
        means.append(bn.running_mean.detach().clone())
        variances.append(bn.running_var.detach().clone())
    return FeatureStats(tuple(ids), means, variances)


def forward_with_stats(model: ModelHandle, inputs: torch.Tensor):
    """One forward pass returning (logits, batch FeatureStats), both differentiable.

    Statistics are channel mean/variance over (batch, H, W) at each
    instrumented layer. The model is run in eval mode so no running-stat
    buffer is touched; the caller's mode is restored afterwards.
    """
    captured = {}

    def hook(name, kind):
        def fn(_module, args, output):
            captured[name] = args[0] if kind == "bn_input" else output

        return fn

    handles = [m.register_forward_hook(hook(n, kind)) for n, m, kind in _stat_points(model.module)]
    was_training = model.training
    model.module.eval()
    try:
        logits = forward_logits(model, inputs)
    finally:
        for h in handles:
            h.remove()
        if was_training:
            model.module.train()

    ids, means, variances = [], [], []
    for name, _, _ in _stat_points(model.module):
        feats = captured[name]
        ids.append(name)
        means.append(feats.mean(dim=(0, 2, 3)))
        variances.append(feats.var(dim=(0, 2, 3), unbiased=False))
    return logits, FeatureStats(tuple(ids), means, variances)


def approximate_feature_stats(model: ModelHandle, batch: torch.Tensor) -> FeatureStats:
    """Batch mean/variance of the instrumented feature maps for ``batch``."""
    with torch.no_grad():
        _, stats = forward_with_stats(model, batch)
    return FeatureStats(
        stats.layer_ids,
        [m.detach().clone() for m in stats.means],
        [v.detach().clone() for v in stats.variances],
    )


def save_checkpoint(model: ModelHandle, path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "spec": dataclasses.asdict(model.spec),
            "output_dim": model.output_dim,
            "state_dict": model.module.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> ModelHandle:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigurationError(
            f"checkpoint {path!r} has unsupported format version "
            f"{payload.get('format_version')!r}"
        )
    spec = ArchitectureSpec(**payload["spec"])
    model = instantiate(spec, payload["output_dim"], seed=0)
    model.module.load_state_dict(payload["state_dict"])
    model.eval_mode()
    return model
