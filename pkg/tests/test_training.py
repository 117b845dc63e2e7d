import math

import numpy as np
import pytest
import torch

import privpoints.training as training
from privpoints.ingest import PointSet
from privpoints.model import ArchitectureConfig, ModelState
from privpoints.privacy import REAL, privatize_real_dataset
from privpoints.training import (Optimizers, TrainConfig, discriminator_loss, discriminator_step,
                                 frozen_stats, generator_loss, generator_step, learning_rate, train)

TINY = ArchitectureConfig.preset("tiny")


def _state(dtype=torch.float64, seed=0):
    return ModelState.initialize(TINY, seed=seed, dtype=dtype)


def _snapshot(net):
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def _constant_discriminator(state, logit=0.0):
    # zero the last layer: every point gets the same logit whatever its input
    last = state.discriminator.head[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.fill_(logit)


@pytest.fixture
def dataset(rng):
    from conftest import two_gaussians
    return privatize_real_dataset(PointSet(two_gaussians(200, rng)), "1", np.random.default_rng(5))


# --- loss anchors ---------------------------------------------------------

def test_losses_equal_ln2_at_half(rng):
    state = _state()
    _constant_discriminator(state)
    state.train()
    B = 32
    real = rng.uniform(-1, 1, (B, 2))
    fake = state.generator(torch.as_tensor(rng.uniform(-1, 1, (B, 2))))
    ones, zeros = np.ones(B, np.uint8), np.zeros(B, np.uint8)
    assert abs(discriminator_loss(state, real, ones, fake, zeros).item() - math.log(2)) < 1e-9
    assert abs(generator_loss(state, fake, zeros).item() - math.log(2)) < 1e-9
    # the step functions report the same per-point value before updating
    opt = Optimizers.create(state, TrainConfig(batch_size=B))
    z = rng.uniform(-1, 1, (B, 2))
    assert abs(discriminator_step(state, opt, real, ones, z, 0.0, rng) - math.log(2)) < 1e-9
    _constant_discriminator(state)
    assert abs(generator_step(state, opt, z, 0.0, rng, context=real) - math.log(2)) < 1e-9


def test_generator_loss_vanishes_as_discriminator_is_fooled(rng):
    state = _state()
    state.train()
    fake = state.generator(torch.as_tensor(rng.uniform(-1, 1, (16, 2))))
    zeros = np.zeros(16, np.uint8)
    losses = []
    for logit in (0.0, 2.0, 5.0, 10.0, 20.0, 40.0):
        _constant_discriminator(state, logit)
        losses.append(generator_loss(state, fake, zeros).item())
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] == pytest.approx(math.log1p(math.exp(-40.0)), rel=1e-9)


def test_flipped_fake_label_reverses_generator_target(rng):
    state = _state()
    _constant_discriminator(state, 3.0)
    state.train()
    fake = state.generator(torch.as_tensor(rng.uniform(-1, 1, (4, 2))))
    flipped = generator_loss(state, fake, np.full(4, REAL, np.uint8)).item()
    assert flipped == pytest.approx(math.log1p(math.exp(3.0)), rel=1e-12)


def test_q_zero_is_standard_gan(rng):
    state = _state(seed=2)
    state.train()
    B = 24
    real = rng.uniform(-1, 1, (B, 2))
    fake = state.generator(torch.as_tensor(rng.uniform(-1, 1, (B, 2)))).detach()
    with frozen_stats(state.discriminator):
        d = discriminator_loss(state, real, np.ones(B, np.uint8), fake, np.zeros(B, np.uint8)).item()
        g = generator_loss(state, fake, np.zeros(B, np.uint8)).item()
        s = state.discriminator(torch.cat([torch.as_tensor(real), fake])).detach().numpy()
        sf = state.discriminator(fake).detach().numpy()
    # -E[log D(x)] - E[log(1 - D(G(z)))] over the combined set, and -E[log D(G(z))]
    assert d == pytest.approx(-(np.log(s[:B]).sum() + np.log1p(-s[B:]).sum()) / (2 * B), rel=1e-10)
    assert g == pytest.approx(-np.log(sf).mean(), rel=1e-10)


# --- schedule -------------------------------------------------------------

def test_learning_rate_schedule():
    cfg = TrainConfig.preset("paper")
    assert learning_rate(1, cfg) == 4e-5
    assert learning_rate(5000, cfg) == 4e-5
    assert learning_rate(5001, cfg) == 4e-6
    assert learning_rate(50001, cfg) == 4e-7
    assert learning_rate(90001, cfg) == 4e-8
    assert learning_rate(100000, cfg) == 4e-8
    # a pure function of the step count
    assert [learning_rate(s, cfg) for s in range(4990, 5010)] == \
           [learning_rate(s, cfg) for s in range(4990, 5010)]


def test_presets():
    full = TrainConfig.preset("paper")
    assert (full.batch_size, full.total_steps, full.lr) == (7500, 100_000, 4e-5)
    desk = TrainConfig.preset("desk")
    assert (desk.batch_size, desk.total_steps) == (256, 2000)
    assert TrainConfig.preset("desk", epsilon="1").q == pytest.approx(1 / (math.e + 1), abs=1e-15)
    with pytest.raises(ValueError):
        TrainConfig(decay_steps=(5, 3))
    with pytest.raises(ValueError):
        TrainConfig.preset("huge")


# --- step isolation -------------------------------------------------------

def test_discriminator_step_leaves_generator_untouched(rng):
    state = _state()
    opt = Optimizers.create(state, TrainConfig(batch_size=16))
    g_before, d_before = _snapshot(state.generator), _snapshot(state.discriminator)
    discriminator_step(state, opt, rng.uniform(-1, 1, (16, 2)), np.ones(16, np.uint8),
                       rng.uniform(-1, 1, (16, 2)), 0.2, rng)
    assert _same(g_before, _snapshot(state.generator))
    assert not _same(d_before, _snapshot(state.discriminator))


def test_generator_step_leaves_discriminator_untouched(rng):
    state = _state()
    opt = Optimizers.create(state, TrainConfig(batch_size=16))
    g_before, d_before = _snapshot(state.generator), _snapshot(state.discriminator)
    generator_step(state, opt, rng.uniform(-1, 1, (16, 2)), 0.2, rng, context=rng.uniform(-1, 1, (16, 2)))
    assert _same(d_before, _snapshot(state.discriminator))
    assert not _same(g_before, _snapshot(state.generator))
    assert all(p.requires_grad for p in state.discriminator.parameters())


# --- whole loop -----------------------------------------------------------

def _cfg(**kw):
    base = dict(batch_size=16, steps_per_epoch=5, epochs=2, lr=1e-3, decay_steps=(), dtype="float64",
                epsilon="1", seed=7)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_steps_returns_state_unchanged(dataset):
    state = _state()
    before = [t.clone() for _, t in state.named_tensors()]
    out, log = train(dataset, _cfg(epochs=0), state=state)
    assert out is state and log.step == []
    assert all(torch.equal(a, t) for a, (_, t) in zip(before, out.named_tensors()))


def test_training_is_bitwise_deterministic(dataset):
    a, log_a = train(dataset, _cfg(), arch=TINY)
    b, log_b = train(dataset, _cfg(), arch=TINY)
    assert log_a.d_loss == log_b.d_loss and log_a.g_loss == log_b.g_loss
    for (_, x), (_, y) in zip(a.named_tensors(), b.named_tensors()):
        assert torch.equal(x, y)
    c, _ = train(dataset, _cfg(seed=8), arch=TINY)
    assert not torch.equal(next(a.named_tensors())[1], next(c.named_tensors())[1])


def test_labels_are_read_only_during_training(dataset):
    digest = dataset.digest()
    labels = dataset.flipped_label.copy()
    state, _ = train(dataset, _cfg(), arch=TINY)
    assert dataset.digest() == digest
    np.testing.assert_array_equal(dataset.flipped_label, labels)
    assert state.info["labels_digest"] == digest
    with pytest.raises(ValueError):
        dataset.flipped_label[0] = 1


def test_batches_are_distinct_and_noise_fresh(dataset, monkeypatch):
    seen = []
    d_step, g_step = training.discriminator_step, training.generator_step

    def spy_d(state, opt, real, real_labels, z, q, rng):
        seen.append(("d", real.copy(), real_labels.copy(), z.copy()))
        return d_step(state, opt, real, real_labels, z, q, rng)

    def spy_g(state, opt, z, q, rng, context=None):
        seen.append(("g", context.copy(), None, z.copy()))
        return g_step(state, opt, z, q, rng, context)

    monkeypatch.setattr(training, "discriminator_step", spy_d)
    monkeypatch.setattr(training, "generator_step", spy_g)
    train(dataset, _cfg(), arch=TINY)
    assert len(seen) == 20
    coords, labels = dataset.points.coords, dataset.flipped_label
    row_of = {tuple(c): i for i, c in enumerate(coords)}
    for (kd, real, real_labels, zd), (kg, ctx, _, zg) in zip(seen[::2], seen[1::2]):
        assert (kd, kg) == ("d", "g")
        rows = [row_of[tuple(r)] for r in real]
        assert len(set(rows)) == len(rows)
        np.testing.assert_array_equal(real_labels, labels[rows])
        np.testing.assert_array_equal(ctx, real)
        assert not np.array_equal(zd, zg)


def test_checkpoints_and_log_written(dataset, tmp_path):
    _, log = train(dataset, _cfg(), arch=TINY, out_dir=tmp_path)
    assert (tmp_path / "epoch_001" / "manifest.json").exists()
    assert (tmp_path / "epoch_002" / "params.bin").exists()
    back = ModelState.load(tmp_path / "final")
    assert back.step == 10
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == "step,d_loss,g_loss,lr"
    assert len(lines) == 11
    assert [e["epoch"] for e in log.epochs] == [1, 2]


def test_non_finite_loss_aborts(dataset, monkeypatch):
    monkeypatch.setattr(training, "discriminator_loss",
                        lambda *a: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(training.TrainingAborted) as info:
        train(dataset, _cfg(), arch=TINY)
    assert info.value.step == 1


def test_dataset_smaller_than_batch_rejected(dataset):
    with pytest.raises(ValueError):
        train(dataset, _cfg(batch_size=len(dataset) + 1), arch=TINY)


# --- finite-difference gradients -------------------------------------------

def _loss_fn(state, which, rng, B=12):
    real = torch.as_tensor(rng.uniform(-1, 1, (B, 2)), dtype=state.dtype)
    z = torch.as_tensor(rng.uniform(-1, 1, (B, 2)), dtype=state.dtype)
    labels = rng.integers(0, 2, B).astype(np.uint8)
    fake_labels = rng.integers(0, 2, B).astype(np.uint8)

    def loss():
        with frozen_stats(state.generator), frozen_stats(state.discriminator):
            fake = state.generator(z)
            if which == "d":
                return discriminator_loss(state, real, labels, fake.detach(), fake_labels)
            return generator_loss(state, fake, fake_labels, context=real)
    net = state.discriminator if which == "d" else state.generator
    return loss, [p for p in net.parameters()]


def _gradient(loss, params):
    for p in params:
        p.grad = None
    loss().backward()
    return [p.grad.detach().clone() for p in params]


def _shift(params, direction, h):
    with torch.no_grad():
        for p, d in zip(params, direction):
            p.add_(d, alpha=h)


@pytest.mark.parametrize("which", ["d", "g"])
def test_directional_gradients_float32(which, rng):
    state = _state(dtype=torch.float32, seed=11)
    state.train()
    loss, params = _loss_fn(state, which, rng)
    grad = _gradient(loss, params)
    gnorm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grad))
    directions = [[g / gnorm for g in grad]]
    for _ in range(4):
        v = [torch.as_tensor(rng.standard_normal(tuple(p.shape)), dtype=p.dtype) for p in params]
        vn = math.sqrt(sum(float((x.double() ** 2).sum()) for x in v))
        directions.append([x / vn for x in v])
    # small enough not to cross ReLU or max-pool switch points, large enough for float32
    h = 1e-3
    for v in directions:
        exact = sum(float((g.double() * x.double()).sum()) for g, x in zip(grad, v))
        with torch.no_grad():
            _shift(params, v, h)
            up = float(loss())
            _shift(params, v, -2 * h)
            down = float(loss())
            _shift(params, v, h)
        fd = (up - down) / (2 * h)
        # error relative to the gradient norm (the directional derivative along grad itself)
        assert abs(fd - exact) / gnorm < 1e-3


@pytest.mark.parametrize("which", ["d", "g"])
def test_coordinate_gradients_float64(which, rng):
    state = _state(dtype=torch.float64, seed=12)
    state.train()
    loss, params = _loss_fn(state, which, rng)
    grad = _gradient(loss, params)
    h = 1e-6
    fd_all, exact_all = [], []
    with torch.no_grad():
        for p, g in zip(params, grad):
            flat, gflat = p.view(-1), g.view(-1)
            for i in rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False):
                old = flat[i].item()
                flat[i] = old + h
                up = float(loss())
                flat[i] = old - h
                down = float(loss())
                flat[i] = old
                fd_all.append((up - down) / (2 * h))
                exact_all.append(gflat[i].item())
    fd_all, exact_all = np.array(fd_all), np.array(exact_all)
    assert np.linalg.norm(fd_all - exact_all) / np.linalg.norm(exact_all) < 1e-6
