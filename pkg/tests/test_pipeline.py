import json
from pathlib import Path

import numpy as np
import pytest

from conftest import two_gaussians
from privpoints.cli import main
from privpoints.ingest import load_points
from privpoints.model import ModelState
from privpoints.pipeline import DEFAULT_EPSILONS, _read_normalized, RunConfig, StageError, generate, run_pipeline, sweep

SMALL = dict(arch="tiny", preset="desk", holdout=0.2, samples=2, sample_size=64, n_generate=50,
             n_places=20, n_candidates=10, granularities=[64], ks=[1, 5], radii=[100.0, 500.0],
             train_overrides={"batch_size": 32, "steps_per_epoch": 5, "epochs": 2})


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    rng = np.random.default_rng(0)
    xy = two_gaussians(600, rng)
    lon, lat = 13.4 + 0.05 * xy[:, 0], 52.5 + 0.03 * xy[:, 1]
    path = tmp_path_factory.mktemp("data") / "points.csv"
    lines = ["id,lon,lat"] + [f"{i},{float(a)!r},{float(b)!r}" for i, (a, b) in enumerate(zip(lon, lat))]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def full_run(data_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = RunConfig.create(data=str(data_csv), out=str(out), seed=3, epsilon="1", **SMALL)
    return cfg, run_pipeline(cfg)


def test_full_run_writes_artifacts(full_run):
    cfg, report = full_run
    out = Path(cfg.out)
    assert report.stages == ["ingest", "privatize", "train", "generate", "evaluate", "query"]
    for rel in ("ingest/normalized.csv", "ingest/holdout.csv", "ingest/bounds.json",
                "privatize/privatized.csv", "train/final/manifest.json", "train/epoch_002/params.bin",
                "train/train_log.csv", "generate/synthetic.csv", "evaluate/metrics.csv",
                "query/range.csv", "query/hotspot.csv", "query/facility.csv", "report.json"):
        assert (out / rel).exists(), rel
    for csv_path in out.rglob("*.csv"):
        assert csv_path.read_text().startswith(f"# config_sha256={cfg.digest()} seed=3")
    saved = json.loads((out / "report.json").read_text())
    assert saved["config_hash"] == cfg.digest() and saved["epsilon"] == "1.0"
    assert set(saved["queries"]) >= {"range_mae_100.0", "hotspot_sdc_64", "facility_sdc_5"}
    assert 0 <= saved["metrics"]["flip_rate"] <= 1
    assert saved["metrics"]["samples"] == 2
    lines = (out / "evaluate/metrics.csv").read_text().splitlines()
    assert lines[1] == "sample_id,cd,emd" and len(lines) == 2 + 2 + 2


def test_holdout_split(full_run):
    cfg, _ = full_run
    train = _read_normalized(Path(cfg.out) / "ingest/normalized.csv")
    hold = _read_normalized(Path(cfg.out) / "ingest/holdout.csv")
    assert (train.count, hold.count) == (480, 120)
    assert sorted([*train.index, *hold.index]) == list(range(600))
    assert np.all(np.abs(train.coords) <= 1)


def test_generated_points_in_source_units(full_run):
    cfg, _ = full_run
    synth, _ = load_points(Path(cfg.out) / "generate/synthetic.csv", ["lon", "lat"])
    bounds = json.loads((Path(cfg.out) / "ingest/bounds.json").read_text())
    assert synth.count == 50
    assert np.all(synth.coords >= np.array(bounds["lo"]) - 1e-12)
    assert np.all(synth.coords <= np.array(bounds["hi"]) + 1e-12)


def test_rerun_is_byte_identical(full_run, data_csv, tmp_path):
    cfg, _ = full_run
    again = RunConfig.create(**{**cfg.__dict__, "out": str(tmp_path)})
    run_pipeline(again)
    first = sorted(p.relative_to(cfg.out) for p in Path(cfg.out).rglob("*") if p.is_file())
    second = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
    assert first == second
    for rel in first:
        assert (Path(cfg.out) / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel


def test_evaluate_only_from_checkpoint(full_run, data_csv, tmp_path):
    cfg, _ = full_run
    ck = str(Path(cfg.out) / "train/final")
    ev = RunConfig.create(data=str(data_csv), out=str(tmp_path), checkpoint=ck, stages=["evaluate"],
                          samples=3, sample_size=100, with_emd=False)
    report = run_pipeline(ev)
    assert report.stages == ["evaluate"] and report.checkpoint == ck
    assert report.metrics["samples"] == 3 and report.metrics["cd_mean"] > 0
    assert (tmp_path / "evaluate/metrics.csv").exists()
    assert not (tmp_path / "train").exists()


def test_generate_determinism(full_run):
    cfg, _ = full_run
    state = ModelState.load(Path(cfg.out) / "train/final")
    a, b = generate(state, 40, seed=5), generate(state, 40, seed=5)
    np.testing.assert_array_equal(a.coords, b.coords)
    assert not np.array_equal(a.coords, generate(state, 40, seed=6).coords)
    one = generate(state, 1, seed=5)
    assert one.coords.shape == (1, 2) and one.unit == "deg"
    with pytest.raises(ValueError):
        generate(state, 0, seed=5)


def test_seeds_are_independent_streams():
    seeds = RunConfig(seed=0).seeds()
    assert len(set(seeds.values())) == len(seeds)
    assert seeds == RunConfig(seed=0).seeds() != RunConfig(seed=1).seeds()


def test_config_validation(tmp_path, data_csv):
    with pytest.raises(ValueError):
        RunConfig.create(bogus=1)
    with pytest.raises(ValueError):
        run_pipeline(RunConfig.create(data=str(data_csv), out=str(tmp_path), stages=["fly"]))
    with pytest.raises(FileNotFoundError):
        run_pipeline(RunConfig.create(data=str(tmp_path / "nope.csv"), out=str(tmp_path)))
    with pytest.raises(ValueError):
        run_pipeline(RunConfig.create(data=str(data_csv), out=str(tmp_path), epsilon="-1"))
    assert RunConfig(out="a").digest() == RunConfig(out="b").digest()
    assert RunConfig(seed=1).digest() != RunConfig(seed=2).digest()


def test_stage_failure_is_reported(full_run, data_csv, tmp_path):
    cfg, _ = full_run
    ck = tmp_path / "ck"
    ck.mkdir()
    for f in ("manifest.json", "params.bin"):
        (ck / f).write_bytes((Path(cfg.out) / "train/final" / f).read_bytes())
    (ck / "params.bin").write_bytes(b"\0" * 8)
    with pytest.raises(StageError) as info:
        run_pipeline(RunConfig.create(data=str(data_csv), out=str(tmp_path / "o"), checkpoint=str(ck),
                                      stages=["evaluate"]))
    assert info.value.stage == "evaluate"


def test_sweep_over_default_budgets(data_csv, tmp_path):
    cfg = RunConfig.create(data=str(data_csv), out=str(tmp_path), stages=["privatize", "train", "evaluate"],
                           with_emd=False, **{**SMALL, "train_overrides": {"batch_size": 16,
                                                                          "steps_per_epoch": 2, "epochs": 1}})
    reports = sweep(cfg)
    assert list(reports) == [str(float(e)) for e in DEFAULT_EPSILONS]
    rows = [line for line in (tmp_path / "sweep.csv").read_text().splitlines() if not line.startswith("#")]
    assert rows[0].startswith("epsilon,") and len(rows) == 1 + 7
    for eps in reports:
        assert (tmp_path / f"eps_{eps}" / "train/final/params.bin").exists()
    # smaller budgets flip more labels
    flips = [reports[str(float(e))].metrics["flip_rate"] for e in DEFAULT_EPSILONS]
    assert flips[0] > flips[-1]


# --- command line ----------------------------------------------------------

def test_cli_train_generate_query(data_csv, tmp_path):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({**SMALL, "data": str(data_csv)}))
    out = tmp_path / "run"
    assert main(["train", "--config", str(conf), "--epsilon", "inf", "--seed", "1", "--out", str(out)]) == 0
    assert (out / "train/train_log.csv").read_text().splitlines()[1] == "step,d_loss,g_loss,lr"
    ck = str(out / "train/final")
    assert main(["generate", "--checkpoint", ck, "--n", "7", "--seed", "2", "--out", str(tmp_path / "g")]) == 0
    synth, _ = load_points(tmp_path / "g/synthetic.csv", ["lon", "lat"])
    assert synth.count == 7
    assert main(["query", "range", "--config", str(conf), "--real", str(data_csv), "--checkpoint", ck,
                 "--radius", "100,250", "--out", str(tmp_path / "q")]) == 0
    rows = (tmp_path / "q/query/range.csv").read_text().splitlines()
    assert rows[1] == "epsilon,radius_m,mae,mpe,excluded_places" and len(rows) == 4
    assert main(["query", "facility", "--config", str(conf), "--real", str(data_csv), "--checkpoint", ck,
                 "--k", "1,3", "--variant", "min-dist", "--out", str(tmp_path / "f")]) == 0
    assert main(["evaluate", "--config", str(conf), "--checkpoint", ck, "--samples", "2",
                 "--sample-size", "50", "--cd-only", "--out", str(tmp_path / "e")]) == 0
    report = json.loads((tmp_path / "e/report.json").read_text())
    assert report["metrics"]["samples"] == 2 and np.isnan(report["metrics"]["emd_mean"])


def test_cli_exit_codes(data_csv, tmp_path):
    assert main(["ingest", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2
    assert main(["train", "--data", str(data_csv), "--epsilon", "abc", "--out", str(tmp_path)]) == 2
    assert main(["ingest", "--data", str(data_csv), "--columns", "x,y", "--out", str(tmp_path)]) == 1
    assert main(["ingest", "--data", str(data_csv), "--out", str(tmp_path / "ok")]) == 0
    with pytest.raises(SystemExit):
        main(["frobnicate"])
