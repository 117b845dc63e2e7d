"""Location-analytics workloads used to score synthetic against real data.

* range queries: point counts within ``radius`` meters of each place,
  compared by mean absolute and mean percentage error;
* hotspots: Gaussian KDE on a ``g x g`` grid, cells above the 95th
  percentile, compared by the Sørensen-Dice coefficient;
* facility location: greedy Max-Inf (coverage within an attraction radius)
  and Min-Dist (k-median) selection over candidate places, compared by SDC.

Distances are meters from the local equirectangular projection of
:class:`~privpoints.ingest.DatasetBounds`; grids live in the normalized
domain so real and synthetic hotspots share cell indices.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .ingest import DatasetBounds, PointSet

log = logging.getLogger(__name__)

RANGE_RADII_M = (50, 100, 200, 500, 1000)
HOTSPOT_GRANULARITIES = tuple(2 ** k for k in range(6, 11))
HOTSPOT_PERCENTILE = 95.0
FACILITY_KS = (1, 5, 10, 20, 50, 75)
N_RANGE_PLACES = 200
N_FACILITY_CANDIDATES = 100
DEFAULT_ATTRACTION_RADIUS_M = 200.0


@dataclass
class PlaceSet:
    """Named places in source units."""

    names: list
    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or len(self.names) != len(self.coords):
            raise ValueError("one coordinate row per place name required")

    @property
    def count(self) -> int:
        return len(self.names)

    def __len__(self):
        return self.count

    def head(self, n: int) -> "PlaceSet":
        return PlaceSet(list(self.names[:n]), self.coords[:n])

    def check_within(self, bounds: DatasetBounds):
        xy = self.coords[:, :bounds.m]
        if np.any(xy < bounds.lo[:xy.shape[1]]) or np.any(xy > bounds.hi[:xy.shape[1]]):
            raise ValueError("places fall outside the dataset bounds")


def load_places(path, columns=("lon", "lat"), name_column="name") -> PlaceSet:
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        names, rows = [], []
        for k, rec in enumerate(reader):
            names.append(rec.get(name_column) or f"place_{k}")
            rows.append([float(rec[c]) for c in columns])
    return PlaceSet(names, np.array(rows))


def random_places(points: PointSet, n: int, rng: np.random.Generator) -> PlaceSet:
    """Pick ``n`` distinct data points as places (fallback when no place file is given)."""
    rows = rng.choice(points.count, size=n, replace=False)
    return PlaceSet([f"place_{k}" for k in range(n)], points.coords[rows])


def _meters(coords, bounds: DatasetBounds | None) -> np.ndarray:
    """Horizontal (first two) coordinates in meters."""
    coords = coords.coords if isinstance(coords, PointSet) else np.asarray(coords, dtype=np.float64)
    coords = np.atleast_2d(coords)
    if bounds is not None:
        coords = bounds.to_meters(coords[:, :bounds.m])
    return coords[:, :2]


def range_count(points, center, radius: float, bounds: DatasetBounds | None = None) -> int:
    """Number of points within ``radius`` meters of ``center`` (boundary inclusive).

    Without ``bounds`` the coordinates are taken to be meters already.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    xy = _meters(points, bounds)
    c = _meters(np.asarray(center, dtype=np.float64)[None, :], bounds)[0]
    return int(np.count_nonzero(((xy - c) ** 2).sum(axis=1) <= radius * radius))


def range_counts(points, places: PlaceSet, radii, bounds: DatasetBounds | None = None) -> np.ndarray:
    """``(len(radii), len(places))`` counts through a k-d tree."""
    tree = cKDTree(_meters(points, bounds))
    centers = _meters(places.coords, bounds)
    out = np.empty((len(radii), len(places)), dtype=np.int64)
    for r, rho in enumerate(radii):
        if rho <= 0:
            raise ValueError("radius must be positive")
        # the tree compares squared distances with rho**2, boundary inclusive like range_count
        out[r] = tree.query_ball_point(centers, rho, return_length=True)
    return out


@dataclass
class RangeError:
    radius: float
    mae: float
    mpe: float
    excluded: int


def range_error_from_counts(real_counts, synth_counts) -> tuple[float, float, int]:
    """MAE over all places; MPE over places with a nonzero real count."""
    real_counts = np.asarray(real_counts, dtype=np.float64)
    synth_counts = np.asarray(synth_counts, dtype=np.float64)
    if real_counts.size == 0:
        raise ValueError("empty place set")
    err = np.abs(real_counts - synth_counts)
    hit = real_counts >= 1
    mpe = float(np.mean(err[hit] / real_counts[hit])) if hit.any() else math.nan
    return float(err.mean()), mpe, int((~hit).sum())


def range_query_error(real, synth, places: PlaceSet, radii=RANGE_RADII_M,
                      bounds: DatasetBounds | None = None) -> list[RangeError]:
    """Per-radius MAE/MPE; synthetic counts are scaled by ``|real| / |synth|``."""
    if len(places) == 0:
        raise ValueError("empty place set")
    n_real = len(real.coords if isinstance(real, PointSet) else real)
    n_synth = len(synth.coords if isinstance(synth, PointSet) else synth)
    rc = range_counts(real, places, radii, bounds)
    sc = range_counts(synth, places, radii, bounds) * (n_real / n_synth)
    out = []
    for k, rho in enumerate(radii):
        mae, mpe, excluded = range_error_from_counts(rc[k], sc[k])
        out.append(RangeError(float(rho), mae, mpe, excluded))
    return out


def scott_bandwidth(xy: np.ndarray) -> np.ndarray:
    """Per-dimension Scott's rule, ``sigma * n^(-1/(d+4))``."""
    n, d = xy.shape
    sigma = xy.std(axis=0, ddof=1) if n > 1 else np.ones(d)
    sigma = np.where(sigma > 0, sigma, 1.0)
    return sigma * n ** (-1.0 / (d + 4))


def grid_centers(g: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return lo + (np.arange(g) + 0.5) * (hi - lo) / g


def kde_grid(xy: np.ndarray, g: int, bandwidth=None, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Gaussian KDE evaluated at the centers of a ``g x g`` grid.

    Row index follows the second coordinate, column index the first. The
    product kernel with a diagonal bandwidth factorizes, so the grid is one
    ``(g, n) @ (n, g)`` product.
    """
    xy = np.asarray(xy, dtype=np.float64)[:, :2]
    h = scott_bandwidth(xy) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, float), (2,))
    c = grid_centers(g, lo, hi)
    norm = 1.0 / math.sqrt(2 * math.pi)
    kx = norm / h[0] * np.exp(-0.5 * ((c[:, None] - xy[None, :, 0]) / h[0]) ** 2)
    ky = norm / h[1] * np.exp(-0.5 * ((c[:, None] - xy[None, :, 1]) / h[1]) ** 2)
    return ky @ kx.T / len(xy)


@dataclass
class HotspotResult:
    g: int
    density: np.ndarray
    threshold: float
    hotspots: frozenset = field(default_factory=frozenset)


def kde_hotspots(points, g: int, bandwidth=None, percentile: float = HOTSPOT_PERCENTILE) -> HotspotResult:
    """Cells whose density is strictly above the ``percentile`` of all ``g^2`` cells.

    ``points`` are normalized 2-D coordinates; cells are flat indices
    ``row * g + col`` of the shared grid over ``[-1, 1]^2``.
    """
    if g < 2:
        raise ValueError("granularity must be at least 2")
    xy = points.coords if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64)
    if xy.shape[1] != 2:
        raise ValueError("hotspot analysis needs two-dimensional points")
    density = kde_grid(xy, g, bandwidth)
    threshold = float(np.percentile(density, percentile))
    cells = frozenset(np.flatnonzero(density.ravel() > threshold).tolist())
    return HotspotResult(g, density, threshold, cells)


def sorensen_dice(A, B) -> float:
    """``2 |A & B| / (|A| + |B|)``; two empty sets score 1."""
    A, B = set(A), set(B)
    if not A and not B:
        log.info("Sørensen-Dice of two empty sets taken as 1")
        return 1.0
    return 2.0 * len(A & B) / (len(A) + len(B))


@dataclass
class FacilityResult:
    variant: str
    selected: list
    objective: float
    objectives: list = field(default_factory=list)

    def prefix(self, k: int) -> set:
        return set(self.selected[:k])


VARIANTS = ("max-inf", "min-dist")


def _distances(customers, candidates: PlaceSet, bounds) -> np.ndarray:
    cust = _meters(customers, bounds)
    cand = _meters(candidates.coords, bounds)
    return np.sqrt(((cust[:, None, :] - cand[None, :, :]) ** 2).sum(axis=2))


def coverage_objective(dist: np.ndarray, chosen, radius: float) -> int:
    if not len(chosen):
        return 0
    return int(np.count_nonzero((dist[:, list(chosen)] <= radius).any(axis=1)))


def total_distance_objective(dist: np.ndarray, chosen) -> float:
    return float(dist[:, list(chosen)].min(axis=1).sum())


def facility_select(customers, candidates: PlaceSet, k: int, variant: str = "max-inf",
                    radius: float = DEFAULT_ATTRACTION_RADIUS_M,
                    bounds: DatasetBounds | None = None) -> FacilityResult:
    """Greedy facility selection; ties go to the lowest candidate index.

    ``max-inf`` repeatedly adds the candidate covering the most not yet
    covered customers within ``radius`` meters. ``min-dist`` adds the
    candidate with the largest drop in total customer-to-nearest-facility
    distance.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds {len(candidates)} candidates")
    if k < 0:
        raise ValueError("k must be non-negative")
    dist = _distances(customers, candidates, bounds)
    n_cand = dist.shape[1]
    available = np.ones(n_cand, dtype=bool)
    selected, objectives = [], []
    if variant == "max-inf":
        cover = dist <= radius
        covered = np.zeros(dist.shape[0], dtype=bool)
        total = 0
        for _ in range(k):
            gain = np.where(available, (cover & ~covered[:, None]).sum(axis=0), -1)
            j = int(np.argmax(gain))
            selected.append(j)
            available[j] = False
            covered |= cover[:, j]
            total = int(covered.sum())
            objectives.append(total)
        return FacilityResult(variant, selected, float(total), objectives)
    best = np.full(dist.shape[0], np.inf)
    total = math.inf
    for _ in range(k):
        after = np.minimum(best[:, None], dist).sum(axis=0)
        after = np.where(available, after, np.inf)
        j = int(np.argmin(after))
        selected.append(j)
        available[j] = False
        best = np.minimum(best, dist[:, j])
        total = float(best.sum())
        objectives.append(total)
    return FacilityResult(variant, selected, total, objectives)


def facility_agreement(real, synth, candidates: PlaceSet, ks=FACILITY_KS, variant: str = "max-inf",
                       radius: float = DEFAULT_ATTRACTION_RADIUS_M,
                       bounds: DatasetBounds | None = None) -> dict:
    """SDC between the facilities chosen on real and on synthetic customers, per ``k``.

    Greedy selections are nested, so one run to ``max(ks)`` serves every ``k``.
    """
    kmax = max(ks)
    fr = facility_select(real, candidates, kmax, variant, radius, bounds)
    fs = facility_select(synth, candidates, kmax, variant, radius, bounds)
    return {k: sorensen_dice(fr.prefix(k), fs.prefix(k)) for k in ks}


def hotspot_agreement(real, synth, granularities=HOTSPOT_GRANULARITIES, bandwidth=None) -> dict:
    """SDC of real vs synthetic hotspot cells for each granularity."""
    return {g: sorensen_dice(kde_hotspots(real, g, bandwidth).hotspots,
                             kde_hotspots(synth, g, bandwidth).hotspots)
            for g in granularities}
