"""Config parsing, run persistence, seed aggregation, and table/plot output.

Config files are flat structured text with dotted keys::

    dataset = digits
    method = kd
    schedule = small_cnn,resid_cnn
    kd.alpha = 1.0

Parsing is strict: unknown keys are rejected, and every invariant
violation is reported with its key path. Serialization is canonical
(sorted keys), so the config hash is stable under reordering.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .distillation import KDConfig
from .errors import AggregationError, ConfigurationError
from .inversion import InversionConfig
from .metrics import EVAL_MODES, AccuracyMatrix
from .model_zoo import preset_names

METHODS = ("finetune", "kd", "kd_qdi", "kd_buffer", "er", "di")
BUFFERED_METHODS = ("er", "kd_buffer")


@dataclass
class StreamConfig:
    dataset: str = "digits"
    data_dir: str = ""
    num_tasks: int = 2
    classes_per_task: int = 5
    val_fraction: float = 0.1
    max_train_per_class: int = 0  # 0 = use everything
    max_test_per_class: int = 0


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.03
    momentum: float = 0.9


@dataclass
class BufferConfig:
    capacity: int = 200
    insert: str = "per_batch"  # or task_end


@dataclass
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    method: str = "finetune"
    schedule: tuple = ("small_cnn",)
    epochs_per_task: int = 20
    batch_size: int = 32
    seeds: tuple = (0, 1, 2)
    eval_modes: tuple = ("task_il", "class_il")
    warm_start: bool = True
    augment_policy: str = "crop_flip"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    buffer: BufferConfig = field(default_factory=BufferConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.stream.num_tasks < 1:
            raise ConfigurationError("num_tasks must be >= 1")
        if self.stream.classes_per_task < 1:
            raise ConfigurationError("classes_per_task must be >= 1")
        if not 0.0 <= self.stream.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must be in [0, 1)")
        for name in self.schedule:
            if name not in preset_names():
                raise ConfigurationError(
                    f"schedule entry {name!r} is not a registered architecture preset"
                )
        if len(self.schedule) not in (1, self.stream.num_tasks):
            raise ConfigurationError(
                f"schedule must list 1 or num_tasks={self.stream.num_tasks} entries, "
                f"got {len(self.schedule)}"
            )
        if self.epochs_per_task < 1:
            raise ConfigurationError("epochs_per_task must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if not self.eval_modes or any(m not in EVAL_MODES for m in self.eval_modes):
            raise ConfigurationError(f"eval_modes must be a subset of {EVAL_MODES}")
        if self.augment_policy not in ("none", "crop_flip"):
            raise ConfigurationError(f"augment.policy must be none or crop_flip")
        if self.optimizer.kind != "sgd":
            raise ConfigurationError(f"optimizer.kind must be sgd, got {self.optimizer.kind!r}")
        if self.optimizer.lr <= 0.0:
            raise ConfigurationError("optimizer.lr must be > 0")
        if not 0.0 <= self.optimizer.momentum < 1.0:
            raise ConfigurationError("optimizer.momentum must be in [0, 1)")
        if self.buffer.capacity < 1:
            raise ConfigurationError("buffer.capacity must be >= 1")
        if self.buffer.insert not in ("per_batch", "task_end"):
            raise ConfigurationError("buffer.insert must be per_batch or task_end")
        self.kd.validate()
        self.inversion.validate()


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "yes", "1"):
        return True
    if text.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_str_list(text: str):
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _parse_int_list(text: str):
    return tuple(int(part) for part in text.split(",") if part.strip())


# key -> (dotted attribute path on ExperimentConfig, parser)
_SCHEMA = {
    "dataset": ("stream.dataset", str),
    "data_dir": ("stream.data_dir", str),
    "num_tasks": ("stream.num_tasks", int),
    "classes_per_task": ("stream.classes_per_task", int),
    "val_fraction": ("stream.val_fraction", float),
    "max_train_per_class": ("stream.max_train_per_class", int),
    "max_test_per_class": ("stream.max_test_per_class", int),
    "method": ("method", str),
    "schedule": ("schedule", _parse_str_list),
    "epochs_per_task": ("epochs_per_task", int),
    "batch_size": ("batch_size", int),
    "seeds": ("seeds", _parse_int_list),
    "eval_modes": ("eval_modes", _parse_str_list),
    "warm_start": ("warm_start", _parse_bool),
    "augment.policy": ("augment_policy", str),
    "optimizer.kind": ("optimizer.kind", str),
    "optimizer.lr": ("optimizer.lr", float),
    "optimizer.momentum": ("optimizer.momentum", float),
    "buffer.capacity": ("buffer.capacity", int),
    "buffer.insert": ("buffer.insert", str),
    "kd.psi": ("kd.psi", float),
    "kd.tau": ("kd.tau", float),
    "kd.alpha": ("kd.alpha", float),
    "kd.beta": ("kd.beta", float),
    "kd.direction": ("kd.kl_direction", str),
    "kd.distance": ("kd.distance", str),
    "inversion.k": ("inversion.k", int),
    "inversion.lr": ("inversion.lr", float),
    "inversion.alpha_tv": ("inversion.alpha_tv", float),
    "inversion.alpha_l2": ("inversion.alpha_l2", float),
    "inversion.alpha_feature": ("inversion.alpha_feature", float),
    "inversion.init_mode": ("inversion.init_mode", str),
    "inversion.stats_source": ("inversion.stats_source", str),
    "inversion.batch_size": ("inversion.batch_size", int),
}


def _set_path(cfg: ExperimentConfig, path: str, value) -> None:
    obj = cfg
    *parents, leaf = path.split(".")
    for name in parents:
        obj = getattr(obj, name)
    setattr(obj, leaf, value)


def _get_path(cfg: ExperimentConfig, path: str):
    obj = cfg
    for name in path.split("."):
        obj = getattr(obj, name)
    return obj


def parse_config_text(text: str) -> ExperimentConfig:
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigurationError(f"unknown config key {key!r}")
        if key in entries:
            raise ConfigurationError(f"duplicate config key {key!r}")
        entries[key] = value

    cfg = ExperimentConfig()
    # Method-aware defaults: DI-from-noise ships with a 4x step budget and
    # noise init unless the file overrides them.
    method = entries.get("method", cfg.method)
    if method == "di":
        if "inversion.k" not in entries:
            cfg.inversion.k = 4 * cfg.inversion.k
        if "inversion.init_mode" not in entries:
            cfg.inversion.init_mode = "gaussian"

    for key, value in entries.items():
        path, parser = _SCHEMA[key]
        try:
            parsed = parser(value)
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(f"bad value for {key!r}: {exc}") from exc
        _set_path(cfg, path, parsed)
    cfg.validate()
    return cfg


def parse_config(path) -> ExperimentConfig:
    """Read and validate a config file; all defaults filled, unknown keys rejected."""
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path!r}")
    with open(path) as f:
        return parse_config_text(f.read())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: every key, sorted, one per line."""
    lines = [
        f"{key} = {_format_value(_get_path(cfg, path))}"
        for key, (path, _) in sorted(_SCHEMA.items())
    ]
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:12]


@dataclass
class RunRecord:
    """Everything one (config, seed) run leaves behind for aggregation."""

    config_hash: str
    method: str
    dataset: str
    seed: int
    matrices: dict  # mode -> AccuracyMatrix
    a_t: dict  # mode -> float
    f_t: dict  # mode -> float or None (single task)
    wall_clock: list  # seconds per task
    synth_steps: list  # inversion steps per task
    peak_live_models: int
    task_logs: list


def save_run_record(record: RunRecord, run_dir) -> None:
    os.makedirs(run_dir, exist_ok=True)
    for mode, matrix in record.matrices.items():
        matrix.to_csv(os.path.join(run_dir, f"matrix_{mode}.csv"))
    payload = {
        "config_hash": record.config_hash,
        "method": record.method,
        "dataset": record.dataset,
        "seed": record.seed,
        "modes": {
            mode: {"a_t": record.a_t[mode], "f_t": record.f_t[mode]}
            for mode in record.matrices
        },
        "wall_clock": [round(w, 3) for w in record.wall_clock],
        "synth_steps": record.synth_steps,
        "peak_live_models": record.peak_live_models,
        "task_logs": record.task_logs,
    }
    with open(os.path.join(run_dir, "run_report.json"), "w") as f:
        json.dump(payload, f, indent=2)


def load_run_record(run_dir) -> RunRecord:
    with open(os.path.join(run_dir, "run_report.json")) as f:
        payload = json.load(f)
    matrices = {}
    for mode in payload["modes"]:
        matrices[mode] = AccuracyMatrix.from_csv(
            os.path.join(run_dir, f"matrix_{mode}.csv"), mode
        )
    return RunRecord(
        config_hash=payload["config_hash"],
        method=payload["method"],
        dataset=payload["dataset"],
        seed=payload["seed"],
        matrices=matrices,
        a_t={m: payload["modes"][m]["a_t"] for m in payload["modes"]},
        f_t={m: payload["modes"][m]["f_t"] for m in payload["modes"]},
        wall_clock=payload["wall_clock"],
        synth_steps=payload["synth_steps"],
        peak_live_models=payload["peak_live_models"],
        task_logs=payload["task_logs"],
    )


def find_run_dirs(root) -> list:
    found = []
    for dirpath, _dirnames, filenames in os.walk(root):
        if "run_report.json" in filenames:
            found.append(dirpath)
    return sorted(found)


def aggregate(records) -> list:
    """Mean +/- sample std of A_T and F_T per (method, mode), rows sorted."""
    if not records:
        raise AggregationError("no run records to aggregate")
    groups = {}
    for record in records:
        groups.setdefault(record.method, []).append(record)

    rows = []
    for method in sorted(groups):
        group = groups[method]
        hashes = {r.config_hash for r in group}
        if len(hashes) > 1:
            raise AggregationError(
                f"method {method!r} mixes config hashes {sorted(hashes)}"
            )
        modes = sorted(group[0].matrices)
        for mode in modes:
            a_values = [r.a_t[mode] for r in group]
            f_values = [r.f_t[mode] for r in group if r.f_t[mode] is not None]

            def stats(values):
                if not values:
                    return None, None
                mean = float(np.mean(values))
                std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
                return mean, std

            a_mean, a_std = stats(a_values)
            f_mean, f_std = stats(f_values)
            rows.append(
                {
                    "method": method,
                    "buffer": method in BUFFERED_METHODS,
                    "mode": mode,
                    "n_seeds": len(group),
                    "a_t_mean": a_mean,
                    "a_t_std": a_std,
                    "f_t_mean": f_mean,
                    "f_t_std": f_std,
                }
            )
    return rows


def format_results_table(rows) -> str:
    def fmt(mean, std):
        if mean is None:
            return "--"
        return f"{mean:.2f} +/- {std:.2f}"

    header = f"{'Method':<12} {'Buffer':<7} {'Mode':<9} {'A_T':<16} {'F_T':<16} {'Seeds':<5}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['method']:<12} {'yes' if row['buffer'] else 'no':<7} "
            f"{row['mode']:<9} {fmt(row['a_t_mean'], row['a_t_std']):<16} "
            f"{fmt(row['f_t_mean'], row['f_t_std']):<16} {row['n_seeds']:<5}"
        )
    return "\n".join(lines)


def write_results(rows, out_dir) -> None:
    import csv

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as f:
        writer = csv.DictWriter(
            f,
            fieldnames=[
                "method", "buffer", "mode", "n_seeds",
                "a_t_mean", "a_t_std", "f_t_mean", "f_t_std",
            ],
        )
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for key in ("a_t_mean", "a_t_std", "f_t_mean", "f_t_std"):
                if out[key] is not None:
                    out[key] = f"{out[key]:.6g}"
            writer.writerow(out)
    with open(os.path.join(out_dir, "results.txt"), "w") as f:
        f.write(format_results_table(rows) + "\n")


def plot_accuracy_over_tasks(records, mode: str, path) -> None:
    """Average seen-task accuracy after each task, per method (mean over seeds)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_method = {}
    for record in records:
        if mode not in record.matrices:
            continue
        matrix = record.matrices[mode]
        curve = [
            float(np.nanmean(matrix.values[i - 1, :i]))
            for i in range(1, matrix.num_tasks + 1)
        ]
        by_method.setdefault(record.method, []).append(curve)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted(by_method):
        curves = np.array(by_method[method])
        xs = np.arange(1, curves.shape[1] + 1)
        ax.errorbar(
            xs, curves.mean(axis=0),
            yerr=curves.std(axis=0) if curves.shape[0] > 1 else None,
            marker="o", capsize=3, label=method,
        )
    ax.set_xlabel("tasks seen")
    ax.set_ylabel("avg accuracy on seen tasks (%)")
    ax.set_title(f"{mode} accuracy over the task sequence")
    ax.set_xticks(np.arange(1, max(m.num_tasks for r in records for m in r.matrices.values()) + 1))
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
