"""The continual loop: train each task's architecture against the frozen
previous model, optionally with synthesized or replayed prior-task data.

Task identity is never consumed by the training path itself: the schedule
lookup and prior-class sampling only use *previous* tasks' metadata, and
identity-based logit masking happens at evaluation time only. Exactly one
previous model is retained as the teacher.

All randomness is derived from (run seed, task index, role), so a run
interrupted after any task and resumed from its run directory finishes
with bit-identical accuracy matrices.
"""

from __future__ import annotations

import copy
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .distillation import total_objective
from .errors import ConfigurationError
from .inversion import dump_image_grid, synthesize_cached
from .metrics import AccuracyMatrix, average_accuracy, average_forgetting, evaluate
from .model_zoo import (
    ArchitectureSpec,
    ModelHandle,
    instantiate,
    live_model_count,
    load_checkpoint,
    make_spec,
    save_checkpoint,
)
from .replay import ReplayBuffer
from .results_io import (
    ExperimentConfig,
    RunRecord,
    config_hash,
    save_run_record,
    serialize_config,
)
from .seeding import derive_seed
from .task_stream import (
    LabeledBatch,
    TaskStream,
    augment,
    build_split_stream,
    save_stream_descriptor,
)

_KD_METHODS = ("kd", "kd_qdi", "kd_buffer")
_BUFFER_METHODS = ("er", "kd_buffer")
_SYNTH_METHODS = ("kd_qdi", "di")


@dataclass
class TaskLog:
    """What one task's training left behind, JSON-serializable."""

    task_index: int
    arch: str
    warm_started: bool
    best_epoch: int
    best_val_acc: float
    epoch_breakdowns: list = field(default_factory=list)  # mean loss components per epoch
    teacher_hash: str | None = None
    synth_steps: int = 0
    live_models_seen: int = 0
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {
            "task_index": self.task_index,
            "arch": self.arch,
            "warm_started": self.warm_started,
            "best_epoch": self.best_epoch,
            "best_val_acc": round(self.best_val_acc, 4),
            "epoch_breakdowns": self.epoch_breakdowns,
            "teacher_hash": self.teacher_hash,
            "synth_steps": self.synth_steps,
            "live_models_seen": self.live_models_seen,
            "wall_clock": round(self.wall_clock, 3),
        }


def make_schedule(cfg: ExperimentConfig, stream: TaskStream) -> list:
    """Resolve preset names into specs matched to the stream's channel count."""
    names = list(cfg.schedule)
    if len(names) == 1:
        names = names * stream.num_tasks
    if len(names) != stream.num_tasks:
        raise ConfigurationError(
            f"schedule length {len(names)} does not match num_tasks {stream.num_tasks}"
        )
    return [make_spec(name, in_channels=stream.channels) for name in names]


def make_student(
    spec: ArchitectureSpec,
    prev_model: ModelHandle | None,
    warm_start: bool,
    output_dim: int,
    seed: int,
):
    """New student for a task: warm-started copy of the previous model when the
    architecture repeats (and warm start is on), otherwise a fresh init."""
    if warm_start and prev_model is not None and prev_model.spec == spec:
        student = ModelHandle(spec, copy.deepcopy(prev_model.module), output_dim)
        return student, True
    return instantiate(spec, output_dim, seed), False


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_task(
    stream: TaskStream,
    t: int,
    schedule: list,
    prev_model: ModelHandle | None,
    buffer: ReplayBuffer | None,
    cfg: ExperimentConfig,
    run_seed: int,
    synth_cache_dir: str | None = None,
    dump_synth_dir: str | None = None,
):
    """Train the task-t model and return (best-validation model, TaskLog)."""
    if len(schedule) != stream.num_tasks:
        raise ConfigurationError("schedule/stream length mismatch")
    started = time.perf_counter()
    method = cfg.method
    output_dim = stream.total_classes

    teacher = prev_model if (method in _KD_METHODS or method in _SYNTH_METHODS) else None
    if teacher is not None:
        teacher.eval_mode()

    student, warm_started = make_student(
        schedule[t - 1], prev_model, cfg.warm_start, output_dim,
        derive_seed(run_seed, "init", t),
    )
    log = TaskLog(
        task_index=t,
        arch=schedule[t - 1].name,
        warm_started=warm_started,
        best_epoch=-1,
        best_val_acc=-1.0,
        teacher_hash=teacher.state_hash() if teacher is not None else None,
        live_models_seen=live_model_count(),
    )

    synth = None
    if method in _SYNTH_METHODS and t >= 2:
        inversion_cfg = cfg.inversion
        current = None
        if inversion_cfg.init_mode == "current_batch":
            train_x, _ = stream.split(t, "train")
            rng = np.random.default_rng(derive_seed(run_seed, "synth_init", t))
            picks = rng.choice(
                train_x.shape[0],
                size=min(inversion_cfg.batch_size, train_x.shape[0]),
                replace=False,
            )
            current = train_x[np.sort(picks)]
        synth = synthesize_cached(
            teacher, current, stream, t, inversion_cfg,
            derive_seed(run_seed, "synth", t), cache_dir=synth_cache_dir,
        )
        log.synth_steps = synth.steps_used
        if dump_synth_dir:
            os.makedirs(dump_synth_dir, exist_ok=True)
            dump_image_grid(synth, stream, os.path.join(dump_synth_dir, f"task_{t:02d}.png"))

    train_x, train_y = stream.split(t, "train")
    optimizer = torch.optim.SGD(
        student.module.parameters(), lr=cfg.optimizer.lr, momentum=cfg.optimizer.momentum
    )

    best_state = None
    for epoch in range(cfg.epochs_per_task):
        student.train_mode()
        shuffle_rng = np.random.default_rng(derive_seed(run_seed, "shuffle", t, epoch))
        sums, n_batches = {}, 0
        for b, idx in enumerate(_epoch_batches(train_x.shape[0], cfg.batch_size, shuffle_rng)):
            raw = LabeledBatch(train_x[idx], train_y[idx])
            view = augment(raw, cfg.augment_policy, derive_seed(run_seed, "view", t, epoch, b))

            replay_batch = None
            if method in _BUFFER_METHODS and buffer is not None and len(buffer) > 0:
                replay_batch = buffer.sample_batch(
                    min(cfg.batch_size, len(buffer)),
                    derive_seed(run_seed, "bufsample", t, epoch, b),
                )
            elif method == "di" and synth is not None:
                replay_batch = LabeledBatch(synth.inputs, synth.targets)

            loss, breakdown = total_objective(
                view,
                student,
                teacher if method in _KD_METHODS else None,
                synthetic_batch=synth if method == "kd_qdi" else None,
                buffer_batch=replay_batch,
                cfg=cfg.kd,
                num_classes=output_dim,
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            if method in _BUFFER_METHODS and buffer is not None and cfg.buffer.insert == "per_batch":
                buffer.insert_batch(raw)
            for key, value in breakdown.items():
                sums[key] = sums.get(key, 0.0) + value
            n_batches += 1

        log.epoch_breakdowns.append(
            {key: round(value / n_batches, 6) for key, value in sums.items()}
        )

        # Model selection: average task-IL validation accuracy over tasks 1..t.
        val_acc = float(np.mean(evaluate(student, stream, t, "task_il", split="val")))
        if val_acc > log.best_val_acc:
            log.best_val_acc = val_acc
            log.best_epoch = epoch
            best_state = copy.deepcopy(student.module.state_dict())

    student.module.load_state_dict(best_state)
    student.eval_mode()

    if method in _BUFFER_METHODS and buffer is not None and cfg.buffer.insert == "task_end":
        buffer.insert_batch(LabeledBatch(train_x, train_y))

    log.wall_clock = time.perf_counter() - started
    return student, log


@dataclass
class RunResult:
    matrices: dict
    record: RunRecord
    run_dir: str | None = None


def _state_path(run_dir, t):
    return os.path.join(run_dir, "state", f"after_task_{t:02d}.pt")


def _checkpoint_path(run_dir, t):
    return os.path.join(run_dir, "checkpoints", f"task_{t:02d}.pt")


def continual_run(
    cfg: ExperimentConfig,
    seed: int,
    out_dir: str | None = None,
    resume: bool = False,
    stop_after_task: int | None = None,
    dump_synth: str | None = None,
) -> RunResult:
    """Run the full task sequence for one seed.

    With ``out_dir`` set, the run directory receives the config snapshot,
    stream descriptor, per-task checkpoints and resumable state, accuracy
    matrices, and the final run report. ``resume=True`` continues from the
    last completed task in ``out_dir``; ``stop_after_task`` ends the run
    early (used to exercise resumption).
    """
    cfg.validate()
    stream = build_split_stream(
        cfg.stream.dataset,
        cfg.stream.num_tasks,
        cfg.stream.classes_per_task,
        seed,
        data_dir=cfg.stream.data_dir or None,
        val_fraction=cfg.stream.val_fraction,
        max_train_per_class=cfg.stream.max_train_per_class,
        max_test_per_class=cfg.stream.max_test_per_class,
    )
    schedule = make_schedule(cfg, stream)
    T = stream.num_tasks

    matrices = {mode: AccuracyMatrix(T, mode) for mode in cfg.eval_modes}
    buffer = (
        ReplayBuffer(cfg.buffer.capacity, seed=derive_seed(seed, "buffer"))
        if cfg.method in _BUFFER_METHODS
        else None
    )
    synth_cache_dir = os.path.join(out_dir, "synth_cache") if out_dir else None

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "state"), exist_ok=True)
        with open(os.path.join(out_dir, "config.conf"), "w") as f:
            f.write(serialize_config(cfg))
        save_stream_descriptor(stream, os.path.join(out_dir, "stream.json"))

    start_t = 1
    prev_model = None
    task_logs = []
    peak_live = 0
    if resume:
        if not out_dir:
            raise ConfigurationError("resume requires an output directory")
        done = [
            t for t in range(1, T + 1) if os.path.exists(_state_path(out_dir, t))
        ]
        if done:
            last = max(done)
            state = torch.load(_state_path(out_dir, last), weights_only=False)
            for mode in cfg.eval_modes:
                for i, row in enumerate(state["rows"][mode], start=1):
                    matrices[mode].set_row(i, row)
            if buffer is not None and state["buffer"] is not None:
                buffer.load_state_dict(state["buffer"])
            task_logs = state["task_logs"]
            peak_live = state["peak_live"]
            start_t = last + 1
            if start_t <= T:
                # The previous model serves as teacher and/or warm-start source.
                prev_model = load_checkpoint(_checkpoint_path(out_dir, last))

    for t in range(start_t, T + 1):
        student, log = train_task(
            stream, t, schedule, prev_model, buffer, cfg, seed,
            synth_cache_dir=synth_cache_dir, dump_synth_dir=dump_synth,
        )
        peak_live = max(peak_live, log.live_models_seen)
        task_logs.append(log.to_dict())

        rows = {}
        for mode in cfg.eval_modes:
            rows[mode] = evaluate(student, stream, t, mode)
            matrices[mode].set_row(t, rows[mode])
        if "task_il" in rows and "class_il" in rows:
            # Masking can only remove wrong candidates, so this holds exactly.
            assert all(a >= b for a, b in zip(rows["task_il"], rows["class_il"]))

        if out_dir:
            save_checkpoint(student, _checkpoint_path(out_dir, t))
            torch.save(
                {
                    "task": t,
                    "rows": {
                        mode: [list(matrices[mode].values[i - 1, :i]) for i in range(1, t + 1)]
                        for mode in cfg.eval_modes
                    },
                    "buffer": buffer.state_dict() if buffer is not None else None,
                    "task_logs": task_logs,
                    "peak_live": peak_live,
                },
                _state_path(out_dir, t),
            )

        prev_model = student
        if stop_after_task is not None and t >= stop_after_task:
            break

    complete = all(matrix.is_complete() for matrix in matrices.values())
    record = RunRecord(
        config_hash=config_hash(cfg),
        method=cfg.method,
        dataset=cfg.stream.dataset,
        seed=seed,
        matrices=matrices,
        a_t={m: average_accuracy(matrices[m]) if complete else None for m in matrices},
        f_t={
            m: (average_forgetting(matrices[m]) if T >= 2 else None) if complete else None
            for m in matrices
        },
        wall_clock=[log["wall_clock"] for log in task_logs],
        synth_steps=[log["synth_steps"] for log in task_logs],
        peak_live_models=peak_live,
        task_logs=task_logs,
    )
    if out_dir and complete:
        save_run_record(record, out_dir)
    return RunResult(matrices=matrices, record=record, run_dir=out_dir)
