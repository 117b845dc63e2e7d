"""Randomized-response label flipping with flip-once persistence.

Real points carry the pseudo-label 1 ("real") and generated points 0
("fake"). Every label shown to the discriminator passes through binary
randomized response, which keeps the label with probability
``p = e^eps / (e^eps + 1)`` and flips it with ``q = 1 - p``.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .ingest import PointSet

REAL = 1
FAKE = 0


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float

    def __post_init__(self):
        eps = float(self.epsilon)
        if math.isnan(eps) or eps <= 0:
            raise ValueError(f"privacy budget must be positive or inf, got {self.epsilon}")
        object.__setattr__(self, "epsilon", eps)

    @classmethod
    def parse(cls, text) -> "PrivacyBudget":
        """Accept a number or the strings ``inf``/``infinity``/``none`` (non-private)."""
        if isinstance(text, PrivacyBudget):
            return text
        if isinstance(text, str) and text.strip().lower() in ("inf", "infinity", "none"):
            return cls(math.inf)
        return cls(float(text))

    @property
    def private(self) -> bool:
        return math.isfinite(self.epsilon)

    @property
    def q(self) -> float:
        return flip_probability(self)

    def __str__(self):
        return "inf" if not self.private else repr(self.epsilon)


def flip_probability(budget) -> float:
    """Probability ``1 / (e^eps + 1)`` that randomized response flips a bit."""
    if not isinstance(budget, PrivacyBudget):
        budget = PrivacyBudget(budget)
    if not budget.private:
        return 0.0
    # e^-eps / (1 + e^-eps) == 1 / (e^eps + 1) without overflow at large eps
    t = math.exp(-budget.epsilon)
    return t / (1.0 + t)


def keep_probability(budget) -> float:
    return 1.0 - flip_probability(budget)


def _check_q(q: float) -> float:
    q = float(q)
    if not (0.0 <= q < 0.5):
        raise ValueError(f"flip probability must lie in [0, 0.5), got {q}")
    return q


def perturb_labels(labels, q: float, rng: np.random.Generator) -> np.ndarray:
    """Invert each bit independently with probability ``q``."""
    q = _check_q(q)
    labels = np.asarray(labels, dtype=np.uint8)
    if q == 0.0:
        return labels.copy()
    flips = rng.random(labels.shape) < q
    return np.where(flips, 1 - labels, labels).astype(np.uint8)


@dataclass(frozen=True)
class LabeledPoint:
    index: int
    coords: tuple
    true_label: int
    flipped_label: int


class PrivatizedDataset:
    """Real points as uploaded from devices: coordinates plus flipped labels.

    The flipped labels are drawn once at construction and stored read-only.
    True labels never leave :func:`privatize_real_dataset`; the trainer only
    ever sees this object.
    """

    def __init__(self, points: PointSet, flipped_label, epsilon: float):
        flipped = np.array(flipped_label, dtype=np.uint8)
        if flipped.shape != (points.count,):
            raise ValueError("one flipped label per point required")
        if np.any(flipped > 1):
            raise ValueError("labels must be bits")
        flipped.setflags(write=False)
        self.points = points
        self.flipped_label = flipped
        self.epsilon = float(epsilon)
        self._row_of = {int(i): r for r, i in enumerate(points.index)}
        if len(self._row_of) != points.count:
            raise ValueError("point indices must be unique")

    def __len__(self):
        return self.points.count

    def labels_for(self, index) -> np.ndarray:
        """Look up the persistent flipped labels of the given stable indices."""
        rows = [self._row_of[int(i)] for i in np.atleast_1d(index)]
        return self.flipped_label[rows]

    def digest(self) -> str:
        """SHA-256 of the (index, flipped_label) table."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.points.index, dtype="<i8").tobytes())
        h.update(self.flipped_label.tobytes())
        return h.hexdigest()

    def flip_rate(self) -> float:
        return float(np.mean(self.flipped_label == FAKE))

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["index", *[f"c{i}" for i in range(self.points.m)], "flipped_label"])
            for i, row, lab in zip(self.points.index, self.points.coords, self.flipped_label):
                w.writerow([int(i), *(repr(float(v)) for v in row), int(lab)])

    @classmethod
    def from_csv(cls, path, epsilon: float = math.nan) -> "PrivatizedDataset":
        with open(path, newline="") as fh:
            reader = csv.reader(line for line in fh if not line.startswith("#"))
            header = next(reader)
            m = len(header) - 2
            rows = [r for r in reader if r]
        index = np.array([int(r[0]) for r in rows], dtype=np.int64)
        coords = np.array([[float(v) for v in r[1:1 + m]] for r in rows])
        labels = np.array([int(r[-1]) for r in rows], dtype=np.uint8)
        return cls(PointSet(coords, index), labels, epsilon)


def privatize_real_dataset(ps: PointSet, budget, rng: np.random.Generator) -> PrivatizedDataset:
    """Label every real point ``1`` and flip each label once with probability ``q``."""
    budget = PrivacyBudget.parse(budget)
    true_labels = np.full(ps.count, REAL, dtype=np.uint8)
    flipped = perturb_labels(true_labels, flip_probability(budget), rng)
    return PrivatizedDataset(ps, flipped, budget.epsilon)


def labeled_points(dataset: PrivatizedDataset) -> list[LabeledPoint]:
    # every uploaded point is real, so its true label is REAL by construction
    return [LabeledPoint(int(i), tuple(c), REAL, int(lab))
            for i, c, lab in zip(dataset.points.index, dataset.points.coords, dataset.flipped_label)]


def analytic_ldp_ratio(q: float) -> float:
    """Worst-case likelihood ratio ``p / q`` of binary randomized response."""
    q = _check_q(q)
    return math.inf if q == 0.0 else (1.0 - q) / q


def empirical_ldp_ratio(q: float, trials: int, rng: np.random.Generator) -> float:
    """Monte-Carlo estimate of the worst-case output likelihood ratio.

    Runs the mechanism ``trials`` times on each input label and returns the
    largest ``Pr[out | in=a] / Pr[out | in=b]`` over outputs and input
    orderings. A zero-probability cell makes the ratio unbounded (``inf``).
    """
    if trials < 10_000:
        raise ValueError("need at least 10^4 trials")
    q = _check_q(q)
    out_real = perturb_labels(np.full(trials, REAL, dtype=np.uint8), q, rng)
    out_fake = perturb_labels(np.full(trials, FAKE, dtype=np.uint8), q, rng)
    worst = 0.0
    for o in (REAL, FAKE):
        pr_real = np.mean(out_real == o)
        pr_fake = np.mean(out_fake == o)
        for num, den in ((pr_real, pr_fake), (pr_fake, pr_real)):
            if den == 0.0:
                return math.inf
            worst = max(worst, num / den)
    return float(worst)


def coverage_ratio(ps: PointSet) -> float:
    """Convex-hull area (volume) of the points over the normalized domain's.

    Reported only; nothing is enforced on it.
    """
    domain = 2.0 ** ps.m
    try:
        return float(ConvexHull(ps.coords).volume / domain)
    except (QhullError, ValueError):
        return 0.0
