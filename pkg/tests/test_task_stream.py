import numpy as np
import pytest
import torch

from hcl.errors import ConfigurationError
from hcl.task_stream import (
    LabeledBatch,
    augment,
    build_split_stream,
    load_stream_from_descriptor,
    save_stream_descriptor,
)


def test_five_two_class_tasks_partition():
    stream = build_split_stream("digits", 5, 2, seed=0)
    assert stream.num_tasks == 5
    all_classes = [c for spec in stream.tasks for c in spec.class_ids]
    assert sorted(all_classes) == list(range(10))
    assert all(len(spec.class_ids) == 2 for spec in stream.tasks)


def test_single_task_covers_all_classes():
    stream = build_split_stream("digits", 1, 10, seed=0)
    assert stream.num_tasks == 1
    assert sorted(stream.tasks[0].class_ids) == list(range(10))


def test_same_seed_same_partition_and_splits():
    a = build_split_stream("digits", 2, 5, seed=7)
    b = build_split_stream("digits", 2, 5, seed=7)
    assert [s.class_ids for s in a.tasks] == [s.class_ids for s in b.tasks]
    for t in (1, 2):
        for split in ("train", "val", "test"):
            assert torch.equal(a.split(t, split)[0], b.split(t, split)[0])
            assert torch.equal(a.split(t, split)[1], b.split(t, split)[1])


def test_different_seeds_change_partition():
    partitions = {
        tuple(c for s in build_split_stream("digits", 2, 5, seed=s).tasks for c in s.class_ids)
        for s in range(5)
    }
    assert len(partitions) > 1


def test_val_holdout_is_ten_percent(digits_stream):
    for spec in digits_stream.tasks:
        total = spec.n_train + spec.n_val
        assert spec.n_val == max(1, int(round(0.1 * total)))


def test_labels_belong_to_task_classes(digits_stream):
    for spec in digits_stream.tasks:
        for split in ("train", "val", "test"):
            labels = digits_stream.split(spec.task_index, split)[1]
            assert set(labels.tolist()) <= set(spec.class_ids)


def test_split_sizes_conserve_samples():
    # No per-class caps: train+val must exhaust the dataset's samples of the
    # task's classes, so the train/val split is a true partition.
    from hcl.datasets import get_dataset

    bundle = get_dataset("digits")
    stream = build_split_stream("digits", 2, 5, seed=3)
    for spec in stream.tasks:
        expected = sum(int((bundle.train_labels == c).sum()) for c in spec.class_ids)
        assert spec.n_train + spec.n_val == expected


def test_per_class_caps_apply():
    stream = build_split_stream(
        "digits", 2, 5, seed=0, max_train_per_class=20, max_test_per_class=5
    )
    for spec in stream.tasks:
        assert spec.n_train + spec.n_val == 20 * 5
        assert spec.n_test == 5 * 5


def test_insufficient_classes_rejected():
    with pytest.raises(ConfigurationError):
        build_split_stream("digits", 6, 2, seed=0)


def test_unknown_dataset_rejected():
    with pytest.raises(ConfigurationError):
        build_split_stream("no_such_data", 2, 2, seed=0)


def _random_batch(seed, n=4, shape=(3, 16, 16)):
    gen = torch.Generator().manual_seed(seed)
    inputs = torch.randn((n, *shape), generator=gen)
    labels = torch.randint(0, 10, (n,), generator=gen)
    return LabeledBatch(inputs, labels)


def test_augment_none_is_identity():
    batch = _random_batch(0)
    out = augment(batch, "none", 123)
    assert torch.equal(out.inputs, batch.inputs)
    assert torch.equal(out.labels, batch.labels)


def test_augment_crop_flip_deterministic():
    batch = _random_batch(1)
    a = augment(batch, "crop_flip", 3)
    b = augment(batch, "crop_flip", 3)
    assert torch.equal(a.inputs, b.inputs)
    assert a.inputs.shape == batch.inputs.shape
    assert torch.equal(a.labels, batch.labels)


def test_augment_seeds_differ_on_random_batches():
    differing = 0
    for i in range(100):
        batch = _random_batch(1000 + i)
        a = augment(batch, "crop_flip", 3)
        b = augment(batch, "crop_flip", 4)
        differing += int(not torch.equal(a.inputs, b.inputs))
    assert differing >= 99


def test_augment_unknown_policy_rejected():
    with pytest.raises(ConfigurationError):
        augment(_random_batch(0), "cutmix", 0)


def test_descriptor_round_trip(tmp_path, digits_stream):
    path = tmp_path / "stream.json"
    save_stream_descriptor(digits_stream, path)
    rebuilt = load_stream_from_descriptor(path)
    assert [s.class_ids for s in rebuilt.tasks] == [s.class_ids for s in digits_stream.tasks]
    assert [s.n_train for s in rebuilt.tasks] == [s.n_train for s in digits_stream.tasks]
    assert torch.equal(rebuilt.split(1, "train")[0], digits_stream.split(1, "train")[0])
