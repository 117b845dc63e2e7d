"""
The command-line pipeline
=========================

``privpoints`` runs the stages ingest, privatize, train, generate, evaluate
and query from a JSON config, with flags overriding config values. This
script drives the same entry point in-process on a small CSV, using the
tiny architecture so that the whole sweep finishes in well under a minute.
"""

# %%
import json
import tempfile
from pathlib import Path

import numpy as np

from privpoints.cli import main

work = Path(tempfile.mkdtemp(prefix="privpoints_demo_"))
rng = np.random.default_rng(0)
pick = rng.random(3000) < 0.6
xy = np.where(pick[:, None], rng.normal([-0.4, -0.3], 0.1, (3000, 2)), rng.normal([0.4, 0.4], 0.15, (3000, 2)))
lon, lat = 13.4 + 0.05 * xy[:, 0], 52.5 + 0.03 * xy[:, 1]
rows = ["venue,lon,lat"] + [f"v{i},{a:.6f},{b:.6f}" for i, (a, b) in enumerate(zip(lon, lat))]
(work / "checkins.csv").write_text("\n".join(rows) + "\n")

config = {
    "data": str(work / "checkins.csv"), "arch": "tiny", "holdout": 0.2,
    "samples": 3, "sample_size": 200, "n_generate": 500,
    "n_places": 50, "n_candidates": 20, "granularities": [64], "ks": [1, 5, 10],
    "train_overrides": {"batch_size": 64, "steps_per_epoch": 20, "epochs": 2},
}
(work / "config.json").write_text(json.dumps(config, indent=2))

# %%
# Train once, then sample 500 points in degrees from the final checkpoint.
main(["train", "--config", str(work / "config.json"), "--epsilon", "1", "--seed", "0",
      "--out", str(work / "run")])
main(["generate", "--checkpoint", str(work / "run/train/final"), "--n", "500", "--seed", "1",
      "--out", str(work / "gen")])
print((work / "gen/synthetic.csv").read_text().splitlines()[:3])

# %%
# A range-query workload against the real data, written as CSV.
main(["query", "range", "--config", str(work / "config.json"), "--real", str(work / "checkins.csv"),
      "--checkpoint", str(work / "run/train/final"), "--out", str(work / "q")])
print((work / "q/query/range.csv").read_text())

# %%
# A sweep trains and scores once per privacy budget and tabulates the results.
# With 40 steps of the tiny network the scores only show the table layout;
# see 03_train_and_generate.py for a model worth scoring.
main(["sweep", "--config", str(work / "config.json"), "--epsilons", "0.5,1,inf",
      "--out", str(work / "sweep")])
print((work / "sweep/sweep.csv").read_text())
