import numpy as np
import pytest
import torch

from hcl.errors import ConfigurationError, ShapeError, UnsupportedArchitectureError
from hcl.model_zoo import (
    ArchitectureSpec,
    approximate_feature_stats,
    collect_running_stats,
    forward_logits,
    instantiate,
    load_checkpoint,
    make_spec,
    save_checkpoint,
)

ALL_PRESETS = ["tiny_conv", "small_cnn", "wide_cnn", "mid_cnn", "resid_cnn", "wide_resid_cnn"]


def _inputs(n=4, channels=1, size=8, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn((n, channels, size, size), generator=gen)


def test_instantiate_is_deterministic_per_seed():
    spec = make_spec("small_cnn", in_channels=1)
    a = instantiate(spec, 10, seed=0)
    b = instantiate(spec, 10, seed=0)
    assert torch.equal(a.parameter_vector(), b.parameter_vector())


def test_instantiate_seed_sensitivity():
    spec = make_spec("small_cnn", in_channels=1)
    a = instantiate(spec, 10, seed=0)
    b = instantiate(spec, 10, seed=1)
    assert not torch.equal(a.parameter_vector(), b.parameter_vector())


def test_wide_cnn_has_more_parameters_than_small():
    small = instantiate(make_spec("small_cnn"), 10, seed=0)
    wide = instantiate(make_spec("wide_cnn"), 10, seed=0)
    assert wide.parameter_count() > small.parameter_count()


def test_capacity_ladder_strictly_increases():
    counts = [
        instantiate(make_spec(name, in_channels=3), 10, seed=0).parameter_count()
        for name in ("tiny_conv", "small_cnn", "mid_cnn", "resid_cnn")
    ]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_unknown_builder_rejected():
    spec = ArchitectureSpec(name="x", builder_id="nope", width=4)
    with pytest.raises(ConfigurationError):
        instantiate(spec, 10, seed=0)
    with pytest.raises(ConfigurationError):
        make_spec("nope")


def test_eval_forward_deterministic():
    model = instantiate(make_spec("mid_cnn", in_channels=1), 10, seed=0)
    x = _inputs()
    assert torch.equal(forward_logits(model, x), forward_logits(model, x))


@pytest.mark.parametrize("name", ["small_cnn", "mid_cnn", "resid_cnn"])
def test_batched_forward_matches_single(name):
    model = instantiate(make_spec(name, in_channels=1), 10, seed=0)
    x = _inputs(n=6)
    batched = forward_logits(model, x)
    single = torch.cat([forward_logits(model, x[i : i + 1]) for i in range(6)])
    assert torch.allclose(batched, single, atol=1e-5)


def test_zero_head_gives_zero_logits():
    model = instantiate(make_spec("small_cnn", in_channels=1), 10, seed=0)
    with torch.no_grad():
        model.module.head.weight.zero_()
        model.module.head.bias.zero_()
    logits = forward_logits(model, _inputs())
    assert torch.equal(logits, torch.zeros_like(logits))


def test_shape_mismatch_rejected():
    model = instantiate(make_spec("small_cnn", in_channels=3), 10, seed=0)
    with pytest.raises(ShapeError):
        forward_logits(model, _inputs(channels=1))


def test_fresh_running_stats_are_zero_mean_unit_var():
    model = instantiate(make_spec("mid_cnn", in_channels=1), 10, seed=0)
    stats = collect_running_stats(model)
    for mean, var in zip(stats.means, stats.variances):
        assert torch.equal(mean, torch.zeros_like(mean))
        assert torch.equal(var, torch.ones_like(var))


def test_running_mean_update_rule():
    # Independent oracle: capture each BN layer's input with a plain hook and
    # compute the batch mean in numpy, then apply running = (1-m)*0 + m*batch.
    model = instantiate(make_spec("mid_cnn", in_channels=1), 10, seed=0)
    momentum = 0.1
    captured = {}
    hooks = [
        m.register_forward_hook(lambda mod, args, out, key=name: captured.setdefault(key, args[0]))
        for name, m in model.module.named_modules()
        if isinstance(m, torch.nn.BatchNorm2d)
    ]
    x = _inputs(n=8)
    model.train_mode()
    model.module(x)
    for h in hooks:
        h.remove()
    model.eval_mode()

    stats = collect_running_stats(model)
    for layer_id, mean in zip(stats.layer_ids, stats.means):
        batch_mean = captured[layer_id].detach().numpy().mean(axis=(0, 2, 3))
        expected = (1.0 - momentum) * 0.0 + momentum * batch_mean
        np.testing.assert_allclose(mean.numpy(), expected, rtol=1e-5, atol=1e-6)


def test_eval_forward_never_touches_running_stats():
    model = instantiate(make_spec("mid_cnn", in_channels=1), 10, seed=0)
    before = model.state_hash()
    forward_logits(model, _inputs())
    assert model.state_hash() == before


def test_train_forward_does_touch_running_stats():
    model = instantiate(make_spec("mid_cnn", in_channels=1), 10, seed=0)
    before = model.state_hash()
    model.train_mode()
    model.module(_inputs())
    assert model.state_hash() != before


def test_collect_running_stats_unsupported_architecture():
    model = instantiate(make_spec("small_cnn", in_channels=1), 10, seed=0)
    with pytest.raises(UnsupportedArchitectureError):
        collect_running_stats(model)


def test_zero_input_through_bias_free_conv_gives_zero_stats():
    model = instantiate(make_spec("tiny_conv", in_channels=1), 10, seed=0)
    stats = approximate_feature_stats(model, torch.zeros(4, 1, 8, 8))
    assert torch.equal(stats.means[0], torch.zeros_like(stats.means[0]))
    assert torch.equal(stats.variances[0], torch.zeros_like(stats.variances[0]))


def test_feature_stats_permutation_invariant():
    model = instantiate(make_spec("mid_cnn", in_channels=1), 10, seed=0)
    x = _inputs(n=8)
    perm = torch.randperm(8, generator=torch.Generator().manual_seed(1))
    a = approximate_feature_stats(model, x)
    b = approximate_feature_stats(model, x[perm])
    for ma, mb in zip(a.means, b.means):
        assert torch.allclose(ma, mb, atol=1e-6)
    for va, vb in zip(a.variances, b.variances):
        assert torch.allclose(va, vb, atol=1e-6)


def test_converged_running_stats_match_batch_estimate(digits_stream):
    # Drive the running stats to convergence by repeated train-mode forwards,
    # then compare against batch statistics of a fresh large batch.
    model = instantiate(make_spec("mid_cnn", in_channels=1), 10, seed=0)
    train_x, _ = digits_stream.split(1, "train")
    rng = np.random.default_rng(0)
    model.train_mode()
    with torch.no_grad():
        for _ in range(80):
            idx = rng.choice(train_x.shape[0], size=128, replace=False)
            model.module(train_x[idx])
    model.eval_mode()

    running = collect_running_stats(model)
    idx = rng.choice(train_x.shape[0], size=512, replace=True)
    approx = approximate_feature_stats(model, train_x[idx])
    for r, a in zip(running.means, approx.means):
        assert torch.norm(a - r) / torch.norm(r) < 0.10
    for r, a in zip(running.variances, approx.variances):
        assert torch.norm(a - r) / torch.norm(r) < 0.10


@pytest.mark.parametrize("name", ALL_PRESETS)
def test_input_gradient_matches_finite_differences(name):
    model = instantiate(make_spec(name, in_channels=1), 4, seed=0)
    model.module.double()
    x = _inputs(n=4, seed=3).double().requires_grad_(True)
    labels = torch.tensor([0, 1, 2, 3])

    loss = torch.nn.functional.cross_entropy(forward_logits(model, x), labels)
    (grad,) = torch.autograd.grad(loss, x)

    rng = np.random.default_rng(abs(hash(name)) & 0xFFFF)
    eps = 1e-3

    def numeric_grad(idx):
        with torch.no_grad():
            xp = x.detach().clone()
            xp[idx] += eps
            up = torch.nn.functional.cross_entropy(forward_logits(model, xp), labels)
            xm = x.detach().clone()
            xm[idx] -= eps
            down = torch.nn.functional.cross_entropy(forward_logits(model, xm), labels)
        return float((up - down) / (2 * eps))

    # Random pixels with non-negligible gradient; below ~1e-2 the O(eps^2)
    # truncation term swamps a 1e-4 relative comparison.
    candidates = [tuple(rng.integers(0, s) for s in x.shape) for _ in range(40)]
    candidates = [idx for idx in candidates if abs(float(grad[idx])) > 1e-2]
    if not candidates:
        flat = int(grad.abs().argmax())
        candidates = [np.unravel_index(flat, x.shape)]
    for idx in candidates[:5]:
        analytic = float(grad[idx])
        numeric = numeric_grad(idx)
        assert abs(analytic - numeric) / max(abs(analytic), abs(numeric)) < 1e-4


def test_checkpoint_round_trip_bit_identical(tmp_path):
    model = instantiate(make_spec("resid_cnn", in_channels=1), 10, seed=0)
    # Perturb the running stats so the checkpoint carries non-default buffers.
    model.train_mode()
    model.module(_inputs(n=8))
    model.eval_mode()
    x = _inputs(n=4, seed=9)
    expected = forward_logits(model, x)

    path = tmp_path / "model.pt"
    save_checkpoint(model, path)
    restored = load_checkpoint(path)
    assert restored.spec == model.spec
    assert torch.equal(forward_logits(restored, x), expected)
