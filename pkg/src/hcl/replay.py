"""Fixed-capacity exemplar buffer with reservoir retention.

Stores raw normalized inputs plus integer labels. Reservoir sampling keeps
every sample ever offered with equal probability capacity/seen_count once
the buffer is full.
"""

from __future__ import annotations

import random

import torch

from .errors import EmptyBufferError
from .task_stream import LabeledBatch


class ReplayBuffer:
    def __init__(self, capacity: int = 200, seed: int = 0):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.inputs: list = []
        self.labels: list = []
        self.seen_count = 0
        self._rng = random.Random(seed)

    def __len__(self) -> int:
        return len(self.inputs)

    def insert(self, inputs: torch.Tensor, label: int) -> None:
        """Offer one sample; kept with probability capacity/seen_count once full."""
        self.seen_count += 1
        if len(self.inputs) < self.capacity:
            self.inputs.append(inputs.detach().clone())
            self.labels.append(int(label))
            return
        slot = self._rng.randrange(self.seen_count)
        if slot < self.capacity:
            self.inputs[slot] = inputs.detach().clone()
            self.labels[slot] = int(label)

    def insert_batch(self, batch: LabeledBatch) -> None:
        for i in range(len(batch)):
            self.insert(batch.inputs[i], int(batch.labels[i]))

    def sample_batch(self, n: int, seed: int) -> LabeledBatch:
        """Uniform sample: without replacement when n <= size, else with."""
        if not self.inputs:
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        rng = random.Random(seed)
        size = len(self.inputs)
        if n <= size:
            indices = rng.sample(range(size), n)
        else:
            indices = [rng.randrange(size) for _ in range(n)]
        return LabeledBatch(
            inputs=torch.stack([self.inputs[i] for i in indices]),
            labels=torch.tensor([self.labels[i] for i in indices], dtype=torch.int64),
        )

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "inputs": list(self.inputs),
            "labels": list(self.labels),
            "seen_count": self.seen_count,
            "rng_state": self._rng.getstate(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.capacity = state["capacity"]
        self.inputs = list(state["inputs"])
        self.labels = list(state["labels"])
        self.seen_count = state["seen_count"]
        self._rng.setstate(state["rng_state"])
