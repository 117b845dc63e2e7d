"""
Training the point-level GAN at desk scale
==========================================

A 10,000-point two-Gaussian mixture stands in for a check-in dataset. The
desk preset (batch 256, 2,000 steps) takes a few minutes on one CPU; pass a
smaller step count on the command line for a quicker look, e.g.
``python demos/03_train_and_generate.py 300``.
"""

# %%
import sys
import time

import numpy as np

from privpoints.ingest import PointSet
from privpoints.metrics import evaluate_generator
from privpoints.model import ArchitectureConfig, generate_points
from privpoints.privacy import privatize_real_dataset
from privpoints.training import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
epsilon = sys.argv[2] if len(sys.argv) > 2 else "1"


def mixture(n, rng):
    pick = rng.random(n) < 0.6
    a = rng.normal([-0.45, -0.35], 0.12, (n, 2))
    b = rng.normal([0.4, 0.45], 0.18, (n, 2))
    return np.clip(np.where(pick[:, None], a, b), -1, 1)


rng = np.random.default_rng(0)
train_xy, held_out = mixture(10_000, rng), mixture(10_000, rng)

# %%
# Flip the real labels once, then train. The loop reads the stored flipped
# labels and never changes them.
ds = privatize_real_dataset(PointSet(train_xy), epsilon, np.random.default_rng(1))
cfg = TrainConfig.preset("desk", epsilon=epsilon, seed=0, steps_per_epoch=100,
                         epochs=max(1, steps // 100))


def progress(epoch, state):
    if epoch % 5 == 0:
        rep = evaluate_generator(state, held_out, samples=3, sample_size=1000, rng=7, with_emd=False)
        print(f"epoch {epoch:3d}  CD {rep.cd_mean:6.2f}")


t = time.perf_counter()
state, log = train(ds, cfg, arch=ArchitectureConfig.preset("desk"), on_epoch=progress)
print(f"{cfg.total_steps} steps in {time.perf_counter() - t:.0f} s; "
      f"last 100 steps: d_loss {np.mean(log.d_loss[-100:]):.3f}, g_loss {np.mean(log.g_loss[-100:]):.3f}")

# %%
# Compare with a uniform-noise "generator" under the same protocol.
model = evaluate_generator(state, held_out, samples=10, sample_size=1000, rng=99, with_emd=False)
noise = evaluate_generator(lambda n, r: r.uniform(-1, 1, (n, 2)), held_out, samples=10,
                           sample_size=1000, rng=99, with_emd=False)
print(f"mean CD: model {model.cd_mean:.2f}, uniform noise {noise.cd_mean:.2f}")

# %%
# Synthetic points come out in sets of the training batch size.
synth = generate_points(state, 5000, np.random.default_rng(3)).coords
for name, pts in (("real", held_out[:5000]), ("synthetic", synth)):
    left = pts[:, 0] < 0
    print(f"{name:>9}: share in lower-left cluster {left.mean():.2f}, "
          f"means {pts[left].mean(0).round(2)} / {pts[~left].mean(0).round(2)}")
