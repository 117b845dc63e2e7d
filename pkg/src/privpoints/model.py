"""Point-level generator and discriminator built on a deepened PointNet.

Both networks treat one batch of ``B`` points as a single unordered set:
per-point layers are shared affine maps (kernel-size-1 convolutions written
as ``nn.Linear`` over the point axis), and the only cross-point operation is
the max-pooled global feature. Batch normalization therefore normalizes over
the points of the set.

Trunk (shared design for G and D)::

    x (B, m) -> encoder, 5 shared stages -> local (stage 1) + global (max pool)
             -> concat [local, global] per point
             -> transformer: 5 shared stages, max pool, 4 FC -> T (m x m, starts at I)

The generator head projects the concatenated features to ``m`` values per
point, applies ``T`` and squashes with ``tanh``. The discriminator head maps
the features plus the ``T``-aligned input coordinates to one sigmoid score
per point.
"""
from __future__ import annotations

import contextlib

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .ingest import PointSet

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


@dataclass
class ArchitectureConfig:
    """Layer widths. The final output widths (``m*m``, ``m``, ``1``) are implied."""

    m: int = 2
    encoder: tuple = (64, 128, 256, 512, 1024)
    stn_conv: tuple = (64, 128, 256, 512, 1024)
    stn_fc: tuple = (512, 256, 128)
    gen_head: tuple = (512, 256, 128)
    disc_head: tuple = (256,)
    noise_prior: str = "uniform"

    def __post_init__(self):
        for name in ("encoder", "stn_conv", "stn_fc", "gen_head", "disc_head"):
            widths = tuple(int(w) for w in getattr(self, name))
            if not widths or min(widths) < 1:
                raise ValueError(f"{name} widths must be positive, got {widths}")
            setattr(self, name, widths)
        if self.m < 1:
            raise ValueError("m must be positive")
        if len(self.encoder) != 5 or len(self.stn_conv) != 5:
            raise ValueError("encoder and transformer need five shared stages")
        if len(self.stn_fc) != 3 or len(self.gen_head) != 3 or len(self.disc_head) != 1:
            raise ValueError("expected 4 transformer FC, 4 generator head and 2 discriminator head stages")
        if self.noise_prior not in ("uniform", "gaussian"):
            raise ValueError(f"unknown noise prior {self.noise_prior!r}")

    @property
    def feature_width(self) -> int:
        return self.encoder[0] + self.encoder[-1]

    @property
    def generator_widths(self) -> tuple:
        return (*self.gen_head, self.m)

    @property
    def discriminator_widths(self) -> tuple:
        return (*self.disc_head, 1)

    @property
    def stn_widths(self) -> tuple:
        return (*self.stn_fc, self.m * self.m)

    @classmethod
    def preset(cls, name: str, m: int = 2) -> "ArchitectureConfig":
        if name == "paper":
            return cls(m=m)
        if name == "desk":
            return cls(m=m, encoder=(32, 64, 128, 256, 512), stn_conv=(32, 64, 128, 256, 512),
                       stn_fc=(256, 128, 64), gen_head=(256, 128, 64), disc_head=(128,))
        if name == "tiny":
            return cls(m=m, encoder=(4, 6, 8, 8, 8), stn_conv=(4, 6, 8, 8, 8),
                       stn_fc=(8, 6, 4), gen_head=(8, 6, 4), disc_head=(6,))
        raise ValueError(f"unknown architecture preset {name!r}")


class SharedMLP(nn.Sequential):
    """Per-point shared layers with BatchNorm + ReLU between stages.

    The last stage gets batch normalization but no ReLU when ``last_bn`` is
    set, and neither when it is not.
    """

    def __init__(self, in_dim, widths, last_bn=True):
        layers = []
        for k, w in enumerate(widths):
            layers.append(nn.Linear(in_dim, w))
            last = k == len(widths) - 1
            if not last or last_bn:
                layers.append(nn.BatchNorm1d(w))
            if not last:
                layers.append(nn.ReLU())
            in_dim = w
        super().__init__(*layers)


class FeatureTransform(nn.Module):
    """Learned ``m x m`` alignment computed from the per-point feature set."""

    def __init__(self, in_dim, m, conv_widths, fc_widths):
        super().__init__()
        self.m = m
        self.conv = SharedMLP(in_dim, conv_widths)
        fc = []
        d = conv_widths[-1]
        # a single pooled vector per set: no batch statistics to normalize over
        for w in fc_widths:
            fc += [nn.Linear(d, w), nn.ReLU()]
            d = w
        self.fc = nn.Sequential(*fc)
        self.out = nn.Linear(d, m * m)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, feats):
        pooled = self.conv(feats).max(dim=0).values
        delta = self.out(self.fc(pooled)).view(self.m, self.m)
        return torch.eye(self.m, dtype=feats.dtype, device=feats.device) + delta


class LargePointNet(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.local = SharedMLP(cfg.m, cfg.encoder[:1])
        self.encoder = SharedMLP(cfg.encoder[0], cfg.encoder[1:])
        self.transform = FeatureTransform(cfg.feature_width, cfg.m, cfg.stn_conv, cfg.stn_fc)

    def global_feature(self, x):
        local = torch.relu(self.local(x))
        return local, self.encoder(local).max(dim=0).values

    def forward(self, x):
        local, glob = self.global_feature(x)
        feats = torch.cat([local, glob.expand(len(x), -1)], dim=1)
        return feats, self.transform(feats)


class Generator(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.trunk = LargePointNet(cfg)
        self.head = SharedMLP(cfg.feature_width, cfg.generator_widths, last_bn=False)

    def forward(self, z):
        feats, T = self.trunk(z)
        return torch.tanh(self.head(feats) @ T.T)


class Discriminator(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.trunk = LargePointNet(cfg)
        self.head = SharedMLP(cfg.feature_width + cfg.m, cfg.discriminator_widths, last_bn=False)

    def logits(self, x):
        feats, T = self.trunk(x)
        return self.head(torch.cat([feats, x @ T.T], dim=1)).squeeze(1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


@dataclass
class ModelState:
    """Generator and discriminator parameters plus bookkeeping."""

    config: ArchitectureConfig
    generator: Generator
    discriminator: Discriminator
    step: int = 0
    info: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: ArchitectureConfig, seed: int = 0,
                   dtype=torch.float32) -> "ModelState":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            gen = Generator(config).to(dtype)
            disc = Discriminator(config).to(dtype)
        return cls(config, gen, disc, 0, {"init_seed": seed})

    @property
    def dtype(self):
        return next(self.generator.parameters()).dtype

    def named_tensors(self):
        """Every float parameter and buffer, in a fixed order."""
        for prefix, net in (("generator", self.generator), ("discriminator", self.discriminator)):
            for name, t in net.state_dict().items():
                if t.is_floating_point():
                    yield f"{prefix}.{name}", t

    def check_finite(self):
        for name, t in self.named_tensors():
            if not torch.isfinite(t).all():
                raise FloatingPointError(f"non-finite values in {name}")

    def train(self, mode=True):
        self.generator.train(mode)
        self.discriminator.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def save(self, directory, extra: dict | None = None) -> Path:
        """Write ``manifest.json`` and a little-endian float blob into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        fmt = "<f8" if self.dtype == torch.float64 else "<f4"
        order, chunks = [], []
        for name, t in self.named_tensors():
            order.append({"name": name, "shape": list(t.shape)})
            chunks.append(t.detach().cpu().numpy().astype(fmt).ravel())
        manifest = {
            "format": "privpoints-checkpoint/1",
            "dtype": fmt,
            "config": _config_json(self.config),
            "step": self.step,
            "info": self.info,
            "parameters": order,
            **(extra or {}),
        }
        blob = np.concatenate(chunks).tobytes() if chunks else b""
        (directory / BLOB_NAME).write_bytes(blob)
        (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "ModelState":
        directory = Path(directory)
        if directory.is_file():
            directory = directory.parent
        try:
            manifest = json.loads((directory / MANIFEST_NAME).read_text())
            blob = (directory / BLOB_NAME).read_bytes()
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"corrupt checkpoint at {directory}: {exc}") from exc
        fmt = manifest.get("dtype", "<f4")
        dtype = torch.float64 if fmt == "<f8" else torch.float32
        cfg = ArchitectureConfig(**manifest["config"])
        state = cls.initialize(cfg, 0, dtype)
        flat = np.frombuffer(blob, dtype=fmt)
        expected = sum(math.prod(p["shape"]) for p in manifest["parameters"])
        if flat.size != expected:
            raise ValueError(f"corrupt checkpoint: {flat.size} values, manifest expects {expected}")
        tensors = dict(state.named_tensors())
        if [p["name"] for p in manifest["parameters"]] != list(tensors):
            raise ValueError("corrupt checkpoint: parameter ordering does not match architecture")
        pos = 0
        with torch.no_grad():
            for p in manifest["parameters"]:
                n = math.prod(p["shape"])
                vals = torch.from_numpy(flat[pos:pos + n].astype(fmt).copy()).view(p["shape"])
                tensors[p["name"]].copy_(vals)
                pos += n
        state.step = manifest["step"]
        state.info = manifest.get("info", {})
        state.check_finite()
        return state


def _config_json(cfg: ArchitectureConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def read_manifest(directory) -> dict:
    directory = Path(directory)
    if directory.is_file():
        directory = directory.parent
    return json.loads((directory / MANIFEST_NAME).read_text())


def sample_noise(B: int, m: int, rng: np.random.Generator, prior: str = "uniform") -> PointSet:
    """Draw ``B`` pseudo-coordinates from the noise prior (uniform on ``[-1, 1]^m``)."""
    if B < 1:
        raise ValueError("need at least one noise point")
    if prior == "uniform":
        z = rng.uniform(-1.0, 1.0, size=(B, m))
    elif prior == "gaussian":
        z = rng.standard_normal((B, m))
    else:
        raise ValueError(f"unknown noise prior {prior!r}")
    return PointSet(z)


def refresh_batch_stats(state: ModelState, rng: np.random.Generator, batch_size: int = 256,
                        passes: int = 32):
    """Recompute the generator's batch-norm population statistics.

    Running averages trail a generator that is still moving; this replaces
    them with the exact average over ``passes`` fresh noise batches of
    ``batch_size``, so evaluation mode matches the current weights.
    """
    bns = [mod for mod in state.generator.modules() if isinstance(mod, nn.BatchNorm1d)]
    saved = [bn.momentum for bn in bns]
    was_training = state.generator.training
    try:
        for bn in bns:
            bn.reset_running_stats()
            bn.momentum = None
        state.generator.train()
        with torch.no_grad():
            for _ in range(passes):
                z = sample_noise(batch_size, state.config.m, rng, state.config.noise_prior)
                state.generator(torch.as_tensor(z.coords, dtype=state.dtype))
    finally:
        for bn, mom in zip(bns, saved):
            bn.momentum = mom
        state.generator.train(was_training)


def _as_tensor(ps, state: ModelState) -> torch.Tensor:
    coords = ps.coords if isinstance(ps, PointSet) else np.asarray(ps, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != state.config.m:
        raise ValueError(f"expected points of dimension {state.config.m}, got shape {coords.shape}")
    return torch.as_tensor(coords, dtype=state.dtype)


def _set_batch_norm(mod: nn.BatchNorm1d, inputs, _output):
    # batch statistics of the set, summed in sorted order so that they are
    # bitwise independent of the order the points arrive in
    x = inputs[0]
    mean = torch.sort(x, dim=0).values.sum(dim=0) / len(x)
    var = torch.sort((x - mean) ** 2, dim=0).values.sum(dim=0) / len(x)
    return (x - mean) / torch.sqrt(var + mod.eps) * mod.weight + mod.bias


@contextlib.contextmanager
def _normalization(net: nn.Module, stats: str, B: int):
    """Run ``net`` without gradients using population or per-set statistics.

    ``"batch"`` normalizes over the set being mapped, as a training step
    does, and leaves the stored running statistics untouched.
    ``"auto"`` picks batch statistics whenever the set has two or more points.
    """
    if stats == "auto":
        stats = "batch" if B >= 2 else "population"
    if stats not in ("batch", "population"):
        raise ValueError(f"unknown statistics mode {stats!r}")
    if stats == "batch" and B < 2:
        raise ValueError("batch statistics need at least two points")
    hooks = []
    if stats == "batch":
        hooks = [mod.register_forward_hook(_set_batch_norm)
                 for mod in net.modules() if isinstance(mod, nn.BatchNorm1d)]
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        for h in hooks:
            h.remove()
        net.train(was_training)


def generator_forward(state: ModelState, z: PointSet, stats: str = "auto") -> PointSet:
    """Map a set of noise points to synthetic points.

    The generator is a set function: with batch statistics the output for
    ``z`` is what a training step would produce for the same noise set.
    """
    state.check_finite()
    x = _as_tensor(z, state)
    with _normalization(state.generator, stats, len(x)):
        out = state.generator(x)
    return PointSet(out.double().numpy())


def discriminator_forward(state: ModelState, x: PointSet, stats: str = "auto") -> np.ndarray:
    """One realness score in ``(0, 1)`` per input point."""
    t = _as_tensor(x, state)
    with _normalization(state.discriminator, stats, len(t)):
        logits = state.discriminator.logits(t).double()
    # keep the score strictly inside (0, 1) even when the logit saturates
    f = np.finfo(np.float64)
    return np.clip(torch.sigmoid(logits).numpy(), f.tiny, 1.0 - f.eps)


def generate_points(state: ModelState, n: int, rng: np.random.Generator,
                    chunk: int | None = None) -> PointSet:
    """Sample ``n`` synthetic normalized points.

    The generator pools a global feature over each set it is given, so points
    are produced in full sets of ``chunk`` noise points (by default the
    training batch size); surplus points of the last set are dropped.
    """
    if n < 1:
        raise ValueError("need at least one point")
    chunk = chunk or state.info.get("batch_size") or max(n, 2)
    parts = []
    for start in range(0, n, chunk):
        z = sample_noise(chunk, state.config.m, rng, state.config.noise_prior)
        parts.append(generator_forward(state, z).coords[:n - start])
    return PointSet(np.concatenate(parts))
