"""The label-private min-max training loop.

Each step:

1. draw ``B`` distinct real points and read their stored flipped labels,
2. generate ``B`` fake points from fresh noise and flip their ``0`` labels
   with probability ``q``; update D with per-point binary cross-entropy,
3. generate ``B`` new fake points, flip fresh labels, update G.

Randomness is split into independent streams (batch sampling, noise, fake
label flips); the real labels were flipped earlier with their own stream and
are only ever read here.
"""
from __future__ import annotations

import csv
import math
from decimal import Decimal
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .model import ModelState, refresh_batch_stats, sample_noise
from .privacy import FAKE, PrivacyBudget, PrivatizedDataset, flip_probability, perturb_labels

STREAMS = ("batch", "noise", "fake_labels", "stats")


@dataclass
class TrainConfig:
    batch_size: int = 7500
    steps_per_epoch: int = 1000
    epochs: int = 100
    lr: float = 4e-5
    decay_steps: tuple = (5000, 50000, 90000)
    decay_factor: float = 0.1
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    epsilon: float = math.inf
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.decay_steps = tuple(int(s) for s in self.decay_steps)
        self.betas = tuple(float(b) for b in self.betas)
        self.epsilon = PrivacyBudget.parse(self.epsilon).epsilon
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.steps_per_epoch < 0 or self.epochs < 0:
            raise ValueError("step counts must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if any(b <= a for a, b in zip(self.decay_steps, self.decay_steps[1:])):
            raise ValueError("decay steps must be strictly increasing")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.epochs

    @property
    def q(self) -> float:
        return flip_probability(self.epsilon)

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name == "paper":
            base = cls()
        elif name == "desk":
            # the full-scale decay steps never trigger within T=2000; decay once late instead
            base = cls(batch_size=256, steps_per_epoch=100, epochs=20,
                       decay_steps=(1500,))
        else:
            raise ValueError(f"unknown training preset {name!r}")
        return replace(base, **overrides)

    def to_json(self) -> dict:
        d = asdict(self)
        d["epsilon"] = "inf" if math.isinf(self.epsilon) else self.epsilon
        d["decay_steps"] = list(self.decay_steps)
        d["betas"] = list(self.betas)
        return d


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Rate used for 1-based ``step``: divided by 10 once per decay step already passed."""
    k = sum(step > s for s in cfg.decay_steps)
    # decimal arithmetic so that 4e-5 decays to exactly the double nearest 4e-6
    return float(Decimal(repr(cfg.lr)) * Decimal(repr(cfg.decay_factor)) ** k)


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    seqs = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, seqs)}


@dataclass
class Optimizers:
    generator: torch.optim.Optimizer
    discriminator: torch.optim.Optimizer

    @classmethod
    def create(cls, state: ModelState, cfg: TrainConfig) -> "Optimizers":
        def make(params):
            return torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps,
                                     weight_decay=cfg.weight_decay)
        return cls(make(state.generator.parameters()), make(state.discriminator.parameters()))

    def set_lr(self, lr: float):
        for opt in (self.generator, self.discriminator):
            for group in opt.param_groups:
                group["lr"] = lr


@dataclass
class TrainLog:
    step: list = field(default_factory=list)
    d_loss: list = field(default_factory=list)
    g_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def record(self, step, d_loss, g_loss, lr):
        self.step.append(step)
        self.d_loss.append(d_loss)
        self.g_loss.append(g_loss)
        self.lr.append(lr)

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["step", "d_loss", "g_loss", "lr"])
            for row in zip(self.step, self.d_loss, self.g_loss, self.lr):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


class TrainingAborted(RuntimeError):
    def __init__(self, message, step, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@contextmanager
def frozen_stats(net: torch.nn.Module):
    """Use batch statistics but leave batch-norm running averages untouched."""
    bns = [mod for mod in net.modules() if isinstance(mod, torch.nn.modules.batchnorm._BatchNorm)]
    saved = [(bn.momentum, bn.num_batches_tracked.clone()) for bn in bns]
    for bn in bns:
        bn.momentum = 0.0
    try:
        yield
    finally:
        for bn, (mom, tracked) in zip(bns, saved):
            bn.momentum = mom
            bn.num_batches_tracked.copy_(tracked)


def _tensor(a, state: ModelState):
    return torch.as_tensor(np.asarray(a), dtype=state.dtype)


def _finite(loss: torch.Tensor, what: str) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {what} loss: {value}")
    return value


def discriminator_loss(state: ModelState, real, real_labels, fake, fake_labels) -> torch.Tensor:
    """Mean per-point BCE of D over the combined real + fake set, against flipped labels."""
    x = torch.cat([_tensor(real, state), fake])
    target = _tensor(np.concatenate([real_labels, fake_labels]), state)
    return F.binary_cross_entropy_with_logits(state.discriminator.logits(x), target)


def generator_loss(state: ModelState, fake, fake_labels, context=None) -> torch.Tensor:
    """Mean per-point BCE pushing D(G(z)) away from the label D was shown.

    An unflipped fake label (0) gives the usual target 1; a fake point whose
    label was flipped to "real" is already presented to D as real, so its
    target is 0. With ``q = 0`` this is the plain non-saturating loss.
    ``context`` real points join the set passed through D (its batch norm and
    pooled feature see the same real/fake mix as in the D step) but do not
    enter the loss.
    """
    target = 1.0 - _tensor(fake_labels, state)
    if context is None:
        logits = state.discriminator.logits(fake)
    else:
        logits = state.discriminator.logits(torch.cat([_tensor(context, state), fake]))[-len(fake):]
    return F.binary_cross_entropy_with_logits(logits, target)


def discriminator_step(state: ModelState, opt: Optimizers, real, real_labels, z, q: float,
                       rng: np.random.Generator) -> float:
    """One D update. ``real_labels`` are the stored flipped labels; G is untouched."""
    if len(real) != len(z):
        raise ValueError("real and noise batches must have equal size")
    state.train()
    with torch.no_grad(), frozen_stats(state.generator):
        fake = state.generator(_tensor(z, state))
    fake_labels = perturb_labels(np.full(len(z), FAKE, dtype=np.uint8), q, rng)
    loss = discriminator_loss(state, real, real_labels, fake, fake_labels)
    value = _finite(loss, "discriminator")
    opt.discriminator.zero_grad(set_to_none=True)
    loss.backward()
    opt.discriminator.step()
    return value


def generator_step(state: ModelState, opt: Optimizers, z, q: float, rng: np.random.Generator,
                   context=None) -> float:
    """One G update from fresh noise and fresh fake-label flips; D is untouched."""
    state.train()
    fake_labels = perturb_labels(np.full(len(z), FAKE, dtype=np.uint8), q, rng)
    for p in state.discriminator.parameters():
        p.requires_grad_(False)
    try:
        fake = state.generator(_tensor(z, state))
        with frozen_stats(state.discriminator):
            loss = generator_loss(state, fake, fake_labels, context)
        value = _finite(loss, "generator")
        opt.generator.zero_grad(set_to_none=True)
        loss.backward()
        opt.generator.step()
    finally:
        for p in state.discriminator.parameters():
            p.requires_grad_(True)
    return value


def train(dataset: PrivatizedDataset, cfg: TrainConfig, state: ModelState | None = None,
          arch=None, out_dir=None, on_epoch=None, log_every: int = 0, info: dict | None = None):
    """Run ``cfg.total_steps`` alternating D/G steps; returns ``(state, log)``.

    ``dataset.points`` must already be normalized. With ``out_dir`` set, a
    checkpoint is written after every epoch (``out_dir/epoch_XXX``) and at
    the end (``out_dir/final``), along with ``train_log.csv``. ``on_epoch``
    is called as ``on_epoch(epoch, state)`` and may return a dict that is
    stored in the log's epoch snapshots.
    """
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"dataset has {len(dataset)} points, batch size is {cfg.batch_size}")
    if state is None:
        from .model import ArchitectureConfig
        arch = arch or ArchitectureConfig(m=dataset.points.m)
        state = ModelState.initialize(arch, seed=cfg.seed, dtype=cfg.torch_dtype)
    if state.config.m != dataset.points.m:
        raise ValueError("model and dataset dimensions differ")
    state.info.update({"train": cfg.to_json(), "labels_digest": dataset.digest(),
                       "batch_size": cfg.batch_size, **(info or {})})
    log = TrainLog()
    if cfg.total_steps == 0:
        return state, log

    out_dir = Path(out_dir) if out_dir is not None else None
    streams = rng_streams(cfg.seed)
    opt = Optimizers.create(state, cfg)
    q = cfg.q
    coords = dataset.points.coords
    labels = dataset.flipped_label
    m = state.config.m
    prior = state.config.noise_prior
    last_ckpt = None

    torch.use_deterministic_algorithms(True)
    for step in range(1, cfg.total_steps + 1):
        lr = learning_rate(step, cfg)
        opt.set_lr(lr)
        rows = streams["batch"].choice(len(coords), size=cfg.batch_size, replace=False)
        real, real_labels = coords[rows], labels[rows]
        try:
            z = sample_noise(cfg.batch_size, m, streams["noise"], prior).coords
            d_loss = discriminator_step(state, opt, real, real_labels, z, q, streams["fake_labels"])
            z = sample_noise(cfg.batch_size, m, streams["noise"], prior).coords
            g_loss = generator_step(state, opt, z, q, streams["fake_labels"], context=real)
            state.check_finite()
        except FloatingPointError as exc:
            raise TrainingAborted(f"step {step}: {exc}", step, last_ckpt) from exc
        state.step += 1
        log.record(step, d_loss, g_loss, lr)
        if log_every and step % log_every == 0:
            print(f"step {step:6d}  d_loss {d_loss:.4f}  g_loss {g_loss:.4f}  lr {lr:.2e}", flush=True)
        if step % cfg.steps_per_epoch == 0:
            epoch = step // cfg.steps_per_epoch
            snapshot = {"epoch": epoch, "step": step}
            refresh_batch_stats(state, streams["stats"], cfg.batch_size)
            if on_epoch is not None:
                snapshot.update(on_epoch(epoch, state) or {})
            log.epochs.append(snapshot)
            if out_dir is not None:
                last_ckpt = state.save(out_dir / f"epoch_{epoch:03d}")
    if cfg.total_steps % cfg.steps_per_epoch:
        refresh_batch_stats(state, streams["stats"], cfg.batch_size)
    state.eval()
    if out_dir is not None:
        state.save(out_dir / "final")
        log.to_csv(out_dir / "train_log.csv")
    return state, log
