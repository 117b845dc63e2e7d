"""
Label privacy with randomized response
======================================

Each real point keeps its coordinates but reports a label that was flipped
once, on the device, with probability ``q = 1 / (e^eps + 1)``. The server
only ever sees the flipped labels and reuses them in every training step.
"""

# %%
# Flip probabilities for a few budgets
import math

import numpy as np

from privpoints.ingest import PointSet
from privpoints.privacy import (REAL, FAKE, empirical_ldp_ratio, flip_probability, perturb_labels,
                                privatize_real_dataset)

for eps in (0.1, 0.5, 1, 2, 10, "inf"):
    print(f"eps={eps!s:>4}  q={flip_probability(eps):.4f}")

# %%
# The likelihood ratio of the two inputs is bounded by e^eps. A Monte-Carlo
# run of the mechanism gets close to that bound.
rng = np.random.default_rng(0)
for eps in (0.5, 1, 2):
    q = flip_probability(eps)
    print(f"eps={eps}: empirical worst ratio {empirical_ldp_ratio(q, 10**6, rng):.3f}, "
          f"e^eps = {math.exp(eps):.3f}")

# %%
# Fake labels are flipped afresh each time they are drawn.
fake = perturb_labels(np.full(20, FAKE, dtype=np.uint8), flip_probability(1), rng)
print("fresh fake labels:", fake)

# %%
# Real labels are flipped once. The resulting table is read-only and its
# digest identifies it, so any later change would be detectable.
pts = PointSet(rng.uniform(-1, 1, (1000, 2)))
ds = privatize_real_dataset(pts, "1", np.random.default_rng(1))
print(f"{len(ds)} points, flip rate {ds.flip_rate():.3f}, digest {ds.digest()[:16]}...")
print("labels of points 0..9:", ds.labels_for(np.arange(10)))
print("reporting as real:", int((ds.flipped_label == REAL).sum()))
