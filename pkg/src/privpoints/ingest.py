"""Loading, cleaning and normalizing raw coordinate files.

Points keep a stable integer ``index`` assigned at load time. The privacy
module attaches each point's persistent flipped label to that index, so two
records with identical coordinates stay distinct.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely

EARTH_RADIUS_M = 6371008.8
METERS_PER_DEGREE = EARTH_RADIUS_M * math.pi / 180.0

UNITS = ("deg", "m", "normalized")


@dataclass
class PointSet:
    """An unordered collection of ``m``-dimensional points.

    ``coords`` is an ``(n, m)`` float64 array, ``index`` the stable ids of the
    rows. ``unit`` is ``"deg"`` or ``"m"`` in source space and ``"normalized"``
    once mapped onto ``[-1, 1]^m``.
    """

    coords: np.ndarray
    index: np.ndarray | None = None
    unit: str = "normalized"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2:
            raise ValueError(f"coords must be 2-D (n, m), got shape {self.coords.shape}")
        if self.index is None:
            self.index = np.arange(len(self.coords), dtype=np.int64)
        else:
            self.index = np.asarray(self.index, dtype=np.int64)
        if self.index.shape != (len(self.coords),):
            raise ValueError("index length must match number of points")
        if self.unit not in UNITS:
            raise ValueError(f"unknown unit {self.unit!r}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coordinates must be finite")

    @property
    def m(self) -> int:
        return self.coords.shape[1]

    @property
    def count(self) -> int:
        return self.coords.shape[0]

    def __len__(self):
        return self.count

    def subset(self, rows) -> "PointSet":
        return PointSet(self.coords[rows], self.index[rows], self.unit, dict(self.meta))


@dataclass
class DatasetBounds:
    """Per-dimension extent of a dataset in source units.

    For ``unit="deg"`` the first two columns are (longitude, latitude) and
    any third column is taken to be in meters already.
    """

    lo: np.ndarray
    hi: np.ndarray
    unit: str = "deg"

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ValueError("lo and hi must be 1-D arrays of equal length")
        if np.any(self.lo > self.hi):
            raise ValueError("bounds minimum exceeds maximum")
        if self.unit not in ("deg", "m"):
            raise ValueError(f"bounds unit must be 'deg' or 'm', got {self.unit!r}")

    @classmethod
    def from_points(cls, ps: PointSet) -> "DatasetBounds":
        return cls(ps.coords.min(axis=0), ps.coords.max(axis=0), ps.unit)

    @property
    def m(self) -> int:
        return len(self.lo)

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    @property
    def meters_per_unit(self) -> np.ndarray:
        """Local equirectangular scale factors, one per dimension."""
        scale = np.ones(self.m)
        if self.unit == "deg":
            mid_lat = math.radians(self.center[1]) if self.m > 1 else 0.0
            scale[0] = METERS_PER_DEGREE * math.cos(mid_lat)
            if self.m > 1:
                scale[1] = METERS_PER_DEGREE
        return scale

    def to_meters(self, coords: np.ndarray) -> np.ndarray:
        """Project source-unit coordinates to local meters around the center."""
        coords = np.asarray(coords, dtype=np.float64)
        return (coords - self.center) * self.meters_per_unit

    def to_json(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "unit": self.unit}

    @classmethod
    def from_json(cls, d: dict) -> "DatasetBounds":
        return cls(d["lo"], d["hi"], d["unit"])


@dataclass
class RegionMask:
    """Polygons (in source units) defining where points are valid."""

    polygons: list = field(default_factory=list)

    def __post_init__(self):
        rings = []
        for poly in self.polygons:
            ring = np.asarray(poly, dtype=np.float64)
            if ring.ndim != 2 or ring.shape[1] != 2:
                raise ValueError("polygon rings must be sequences of [x, y] pairs")
            if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
                ring = ring[:-1]
            if len(ring) < 3:
                raise ValueError("degenerate polygon: fewer than 3 vertices")
            if not shapely.LinearRing(ring).is_simple:
                raise ValueError("polygon ring is self-intersecting")
            rings.append(ring)
        self.polygons = rings


def load_points(path, columns, unit: str = "deg") -> tuple[PointSet, DatasetBounds]:
    """Read coordinate columns from a CSV file with a header row.

    Rows whose selected fields are missing or not finite decimals are
    skipped; the number skipped is stored in ``meta["skipped"]``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    columns = list(columns)
    if len(columns) not in (2, 3):
        raise ValueError("expected 2 or 3 coordinate columns")
    rows, skipped = [], 0
    with path.open(newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise KeyError(f"missing column(s) {missing} in {path}")
        for rec in reader:
            try:
                vals = [float(rec[c]) for c in columns]
            except (TypeError, ValueError):
                skipped += 1
                continue
            if not all(math.isfinite(v) for v in vals):
                skipped += 1
                continue
            rows.append(vals)
    if not rows:
        raise ValueError(f"no valid rows in {path} ({skipped} skipped)")
    ps = PointSet(np.array(rows), unit=unit,
                  meta={"source": str(path), "columns": columns, "skipped": skipped})
    return ps, DatasetBounds.from_points(ps)


def load_region_mask(path) -> RegionMask:
    """Read a polygon file: a JSON list of rings, or a GeoJSON (Multi)Polygon."""
    with open(path) as fh:
        doc = json.load(fh)
    rings = []

    def collect(geom):
        if geom["type"] == "Polygon":
            rings.append(geom["coordinates"][0])
        elif geom["type"] == "MultiPolygon":
            rings.extend(p[0] for p in geom["coordinates"])

    if isinstance(doc, list):
        rings = doc
    elif doc.get("type") == "FeatureCollection":
        for feat in doc["features"]:
            collect(feat["geometry"])
    elif doc.get("type") == "Feature":
        collect(doc["geometry"])
    else:
        collect(doc)
    return RegionMask(rings)


def filter_region(ps: PointSet, mask: RegionMask) -> PointSet:
    """Keep points inside or on the boundary of any mask polygon, in order."""
    if not mask.polygons:
        return ps
    if ps.m < 2:
        raise ValueError("region filtering needs at least two coordinate dimensions")
    keep = np.zeros(ps.count, dtype=bool)
    x, y = ps.coords[:, 0], ps.coords[:, 1]
    for ring in mask.polygons:
        poly = shapely.Polygon(ring)
        shapely.prepare(poly)
        keep |= shapely.intersects_xy(poly, x, y)
    return ps.subset(np.flatnonzero(keep))


def normalize(ps: PointSet, bounds: DatasetBounds) -> PointSet:
    """Affinely map each dimension of ``bounds`` onto ``[-1, 1]``."""
    if ps.m != bounds.m:
        raise ValueError(f"point dimension {ps.m} != bounds dimension {bounds.m}")
    width = bounds.hi - bounds.lo
    if np.any(width <= 0):
        raise ValueError("zero-width dimension in bounds")
    out = 2.0 * (ps.coords - bounds.lo) / width - 1.0
    # tolerate rounding at the edges, not genuine out-of-bounds points
    if np.any(np.abs(out) > 1.0 + 1e-12):
        raise ValueError("bounds do not enclose all points")
    return PointSet(np.clip(out, -1.0, 1.0), ps.index.copy(), "normalized", dict(ps.meta))


def denormalize(ps: PointSet, bounds: DatasetBounds) -> PointSet:
    if ps.m != bounds.m:
        raise ValueError(f"point dimension {ps.m} != bounds dimension {bounds.m}")
    coords = (ps.coords + 1.0) / 2.0 * (bounds.hi - bounds.lo) + bounds.lo
    return PointSet(coords, ps.index.copy(), bounds.unit, dict(ps.meta))


def sample_batch(ps: PointSet, B: int, rng: np.random.Generator) -> PointSet:
    """Draw ``B`` distinct points uniformly without replacement."""
    if B > ps.count:
        raise ValueError(f"batch size {B} exceeds point count {ps.count}")
    if B < 1:
        raise ValueError("batch size must be positive")
    rows = rng.choice(ps.count, size=B, replace=False)
    return ps.subset(rows)


def write_points(path, ps: PointSet, columns=None, header_lines=()):
    """Write coordinates as CSV; ``header_lines`` are emitted as ``#`` comments first."""
    columns = columns or [f"c{i}" for i in range(ps.m)]
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["index", *columns])
        for i, row in zip(ps.index, ps.coords):
            w.writerow([int(i), *(repr(float(v)) for v in row)])
