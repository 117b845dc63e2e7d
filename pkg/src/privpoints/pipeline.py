"""End-to-end experiment driver.

Stages run in a fixed order and persist their outputs under ``out``::

    ingest/     normalized.csv, holdout.csv, bounds.json
    privatize/  privatized.csv        (index, coords, flipped_label)
    train/      epoch_XXX/, final/, train_log.csv
    generate/   synthetic.csv         (source units)
    evaluate/   metrics.csv
    query/      range.csv, hotspot.csv, facility.csv
    report.json

Every CSV starts with a ``# config_sha256=...`` provenance line.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analytics
from .ingest import (DatasetBounds, PointSet, denormalize, filter_region, load_points,
                     load_region_mask, normalize, write_points)
from .metrics import DEFAULT_SAMPLE_SIZE, DEFAULT_SAMPLES, evaluate_generator
from .model import ArchitectureConfig, ModelState, generate_points, read_manifest
from .privacy import PrivacyBudget, PrivatizedDataset, coverage_ratio, privatize_real_dataset
from .training import TrainConfig, train

STAGES = ("ingest", "privatize", "train", "generate", "evaluate", "query")
DEFAULT_EPSILONS = (0.1, 0.25, 0.5, 1, 2, 5, 10)
SEED_STREAMS = ("split", "privacy", "train", "generate", "evaluate", "query")


@dataclass
class RunConfig:
    data: str | None = None
    columns: list = field(default_factory=lambda: ["lon", "lat"])
    unit: str = "deg"
    mask: str | None = None
    epsilon: str = "inf"
    arch: str = "desk"
    preset: str = "desk"
    seed: int = 0
    out: str = "run"
    stages: list = field(default_factory=lambda: list(STAGES))
    holdout: float = 0.0
    checkpoint: str | None = None
    n_generate: int = DEFAULT_SAMPLE_SIZE
    samples: int = DEFAULT_SAMPLES
    sample_size: int = DEFAULT_SAMPLE_SIZE
    with_emd: bool = True
    places: str | None = None
    n_places: int = analytics.N_RANGE_PLACES
    n_candidates: int = analytics.N_FACILITY_CANDIDATES
    queries: list = field(default_factory=lambda: ["range", "hotspot", "facility"])
    radii: list = field(default_factory=lambda: list(analytics.RANGE_RADII_M))
    granularities: list = field(default_factory=lambda: list(analytics.HOTSPOT_GRANULARITIES))
    ks: list = field(default_factory=lambda: list(analytics.FACILITY_KS))
    variant: str = "max-inf"
    attraction_radius: float = analytics.DEFAULT_ATTRACTION_RADIUS_M
    epsilons: list = field(default_factory=lambda: list(DEFAULT_EPSILONS))
    train_overrides: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        with open(path) as fh:
            values = json.load(fh)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.create(**values)

    @classmethod
    def create(cls, **values) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def validate(self):
        PrivacyBudget.parse(self.epsilon)
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ValueError(f"unknown stage(s) {bad}")
        needs_data = {"ingest", "evaluate", "query"} & set(self.stages)
        for name in ("data", "mask", "places", "checkpoint"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise FileNotFoundError(f"{name} path does not exist: {path}")
        if needs_data and self.data is None and not (Path(self.out) / "ingest").is_dir():
            raise ValueError("a data file is required")
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout fraction must lie in [0, 1)")

    def digest(self) -> str:
        """SHA-256 over every setting except the output directory."""
        d = asdict(self)
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def seeds(self) -> dict:
        seqs = np.random.SeedSequence(self.seed).spawn(len(SEED_STREAMS))
        return {name: int(s.generate_state(1)[0]) for name, s in zip(SEED_STREAMS, seqs)}


@dataclass
class ExperimentReport:
    config_hash: str
    seeds: dict
    epsilon: str
    checkpoint: str | None = None
    metrics: dict = field(default_factory=dict)
    queries: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage


def _header(cfg: RunConfig, **extra) -> list[str]:
    items = " ".join(f"{k}={v}" for k, v in extra.items())
    return [f"config_sha256={cfg.digest()} seed={cfg.seed} {items}".rstrip()]


def _write_rows(path, header_lines, columns, rows):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _fmt_eps(eps) -> str:
    return str(PrivacyBudget.parse(eps))


class Pipeline:
    """Holds the artifacts passed between stages of one run."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.seeds = cfg.seeds()
        self.report = ExperimentReport(cfg.digest(), self.seeds, _fmt_eps(cfg.epsilon))
        self.train_points: PointSet | None = None
        self.eval_points: PointSet | None = None
        self.bounds: DatasetBounds | None = None
        self.dataset: PrivatizedDataset | None = None
        self.state: ModelState | None = None

    def dir(self, stage) -> Path:
        d = self.out / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _relative(self, path) -> str:
        # paths inside the run directory are stored relative to it, so reruns
        # into another directory give identical reports
        path = Path(path)
        try:
            return str(path.resolve().relative_to(self.out.resolve()))
        except ValueError:
            return str(path)

    # stages ---------------------------------------------------------------

    def ingest(self):
        cfg = self.cfg
        ps, _ = load_points(cfg.data, cfg.columns, cfg.unit)
        if cfg.mask:
            ps = filter_region(ps, load_region_mask(cfg.mask))
        bounds = DatasetBounds.from_points(ps)
        if cfg.checkpoint:
            # evaluate against the frame the checkpoint was trained in
            info = read_manifest(cfg.checkpoint).get("info", {})
            if "bounds" in info:
                bounds = DatasetBounds.from_json(info["bounds"])
                inside = np.all((ps.coords >= bounds.lo) & (ps.coords <= bounds.hi), axis=1)
                ps = ps.subset(np.flatnonzero(inside))
        norm = normalize(ps, bounds)
        rng = np.random.default_rng(self.seeds["split"])
        n_hold = int(round(cfg.holdout * norm.count))
        order = rng.permutation(norm.count)
        hold, keep = np.sort(order[:n_hold]), np.sort(order[n_hold:])
        d = self.dir("ingest")
        head = _header(cfg, stage="ingest", skipped=ps.meta.get("skipped", 0))
        write_points(d / "normalized.csv", norm.subset(keep), header_lines=head)
        write_points(d / "holdout.csv", norm.subset(hold), header_lines=head)
        (d / "bounds.json").write_text(json.dumps(bounds.to_json(), indent=2))
        self.bounds = bounds
        self.train_points = norm.subset(keep)
        self.eval_points = norm.subset(hold) if n_hold else self.train_points

    def _load_ingested(self):
        if self.train_points is not None:
            return
        d = self.out / "ingest"
        if not d.is_dir():
            self.ingest()
            return
        self.bounds = DatasetBounds.from_json(json.loads((d / "bounds.json").read_text()))
        self.train_points = _read_normalized(d / "normalized.csv")
        hold = _read_normalized(d / "holdout.csv")
        self.eval_points = hold if hold.count else self.train_points

    def privatize(self):
        self._load_ingested()
        budget = PrivacyBudget.parse(self.cfg.epsilon)
        self.dataset = privatize_real_dataset(self.train_points, budget,
                                              np.random.default_rng(self.seeds["privacy"]))
        d = self.dir("privatize")
        self.dataset.to_csv(d / "privatized.csv",
                            _header(self.cfg, stage="privatize", epsilon=budget))
        self.report.metrics["flip_rate"] = self.dataset.flip_rate()
        self.report.metrics["coverage_ratio"] = coverage_ratio(self.train_points)

    def train(self):
        if self.dataset is None:
            path = self.out / "privatize" / "privatized.csv"
            if path.exists():
                self.dataset = PrivatizedDataset.from_csv(path, PrivacyBudget.parse(self.cfg.epsilon).epsilon)
            else:
                self.privatize()
        self._load_ingested()
        tcfg = TrainConfig.preset(self.cfg.preset, epsilon=self.cfg.epsilon,
                                  seed=self.seeds["train"], **self.cfg.train_overrides)
        arch = ArchitectureConfig.preset(self.cfg.arch, m=self.dataset.points.m)
        d = self.dir("train")
        info = {"epsilon": _fmt_eps(self.cfg.epsilon), "config_sha256": self.cfg.digest(),
                "seeds": self.seeds, "bounds": self.bounds.to_json()}
        state, log = train(self.dataset, tcfg, arch=arch, out_dir=d, info=info)
        log.to_csv(d / "train_log.csv", _header(self.cfg, stage="train"))
        self.state = state
        self.report.checkpoint = self._relative(d / "final")

    def _load_state(self):
        if self.state is not None:
            return
        path = self.cfg.checkpoint or self.out / "train" / "final"
        self.state = ModelState.load(path)
        self.report.checkpoint = self._relative(path)
        if self.bounds is None and "bounds" in self.state.info:
            self.bounds = DatasetBounds.from_json(self.state.info["bounds"])

    def generate(self):
        self._load_state()
        self._load_ingested()
        synth = generate(self.state, self.cfg.n_generate, self.seeds["generate"], self.bounds)
        write_points(self.dir("generate") / "synthetic.csv", synth,
                     columns=list(self.cfg.columns)[:synth.m],
                     header_lines=_header(self.cfg, stage="generate", n=synth.count))

    def evaluate(self):
        self._load_state()
        self._load_ingested()
        n = min(self.cfg.sample_size, self.eval_points.count)
        rep = evaluate_generator(self.state, self.eval_points, self.cfg.samples, n,
                                 np.random.default_rng(self.seeds["evaluate"]), self.cfg.with_emd)
        rep.to_csv(self.dir("evaluate") / "metrics.csv", _header(self.cfg, stage="evaluate"))
        self.report.metrics.update(rep.summary())

    def query(self):
        self._load_state()
        self._load_ingested()
        cfg = self.cfg
        rng = np.random.default_rng(self.seeds["query"])
        real_src = denormalize(self.eval_points, self.bounds)
        if cfg.places:
            places = analytics.load_places(cfg.places, cfg.columns[:2])
        else:
            places = analytics.random_places(real_src, min(cfg.n_places, real_src.count), rng)
        candidates = places.head(cfg.n_candidates)
        n = min(cfg.sample_size, self.eval_points.count)
        synth = [generate_points(self.state, n, rng) for _ in range(cfg.samples)]
        synth_src = [denormalize(s, self.bounds) for s in synth]
        d = self.dir("query")
        head = _header(cfg, stage="query", epsilon=_fmt_eps(cfg.epsilon))
        eps = _fmt_eps(cfg.epsilon)
        if "range" in cfg.queries:
            per = [analytics.range_query_error(real_src, s, places, cfg.radii, self.bounds) for s in synth_src]
            rows = []
            for k, rho in enumerate(cfg.radii):
                mae = float(np.mean([p[k].mae for p in per]))
                mpe = float(np.nanmean([p[k].mpe for p in per]))
                rows.append([eps, float(rho), mae, mpe, per[0][k].excluded])
                self.report.queries[f"range_mae_{rho}"] = mae
                self.report.queries[f"range_mpe_{rho}"] = mpe
            _write_rows(d / "range.csv", head, ["epsilon", "radius_m", "mae", "mpe", "excluded_places"], rows)
        if "hotspot" in cfg.queries and self.eval_points.m == 2:
            rows = []
            for g in cfg.granularities:
                ref = analytics.kde_hotspots(self.eval_points, g).hotspots
                sdc = float(np.mean([analytics.sorensen_dice(ref, analytics.kde_hotspots(s, g).hotspots)
                                     for s in synth]))
                rows.append([eps, int(g), sdc])
                self.report.queries[f"hotspot_sdc_{g}"] = sdc
            _write_rows(d / "hotspot.csv", head, ["epsilon", "granularity", "sdc"], rows)
        if "facility" in cfg.queries:
            ks = [k for k in cfg.ks if k <= len(candidates)]
            real_sel = analytics.facility_select(real_src, candidates, max(ks), cfg.variant,
                                                 cfg.attraction_radius, self.bounds)
            per = []
            for s in synth_src:
                sel = analytics.facility_select(s, candidates, max(ks), cfg.variant,
                                                cfg.attraction_radius, self.bounds)
                per.append([analytics.sorensen_dice(real_sel.prefix(k), sel.prefix(k)) for k in ks])
            means = np.mean(per, axis=0)
            rows = [[eps, cfg.variant, int(k), float(v)] for k, v in zip(ks, means)]
            for k, v in zip(ks, means):
                self.report.queries[f"facility_sdc_{k}"] = float(v)
            _write_rows(d / "facility.csv", head, ["epsilon", "variant", "k", "sdc"], rows)

    def run(self) -> ExperimentReport:
        self.out.mkdir(parents=True, exist_ok=True)
        for stage in STAGES:
            if stage not in self.cfg.stages:
                continue
            try:
                getattr(self, stage)()
            except Exception as exc:
                raise StageError(stage, exc) from exc
            self.report.stages.append(stage)
        (self.out / "report.json").write_text(json.dumps(self.report.to_json(), indent=2, sort_keys=True))
        return self.report


def _read_normalized(path) -> PointSet:
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        rows = [r for r in reader if r]
    m = len(header) - 1
    if not rows:
        return PointSet(np.empty((0, m)))
    index = np.array([int(r[0]) for r in rows], dtype=np.int64)
    coords = np.array([[float(v) for v in r[1:]] for r in rows])
    return PointSet(coords, index)


def run_pipeline(cfg: RunConfig) -> ExperimentReport:
    return Pipeline(cfg).run()


def generate(state: ModelState, n: int, seed: int, bounds: DatasetBounds | None = None) -> PointSet:
    """Sample ``n`` points (noise -> generator -> denormalize); deterministic per seed."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if bounds is None:
        if "bounds" not in state.info:
            raise ValueError("no dataset bounds available to denormalize with")
        bounds = DatasetBounds.from_json(state.info["bounds"])
    ps = generate_points(state, n, np.random.default_rng(seed))
    return denormalize(ps, bounds)


def sweep(cfg: RunConfig, epsilons=None) -> dict:
    """Run the privatize -> train -> evaluate -> query stages once per budget."""
    epsilons = list(epsilons or cfg.epsilons)
    base = Path(cfg.out)
    shared = Pipeline(RunConfig.create(**{**asdict(cfg), "stages": ["ingest"]}))
    shared.run()
    reports = {}
    for eps in epsilons:
        sub = RunConfig.create(**{**asdict(cfg), "epsilon": str(eps), "out": str(base / f"eps_{_fmt_eps(eps)}"),
                                  "stages": [s for s in cfg.stages if s != "ingest"]})
        p = Pipeline(sub)
        p.train_points, p.eval_points, p.bounds = shared.train_points, shared.eval_points, shared.bounds
        reports[_fmt_eps(eps)] = p.run()
    keys = sorted({k for r in reports.values() for k in (*r.metrics, *r.queries)})
    rows = [[eps, *[{**r.metrics, **r.queries}.get(k, math.nan) for k in keys]] for eps, r in reports.items()]
    _write_rows(base / "sweep.csv", _header(cfg, stage="sweep"), ["epsilon", *keys], rows)
    return reports
