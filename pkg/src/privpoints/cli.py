"""Command-line entry point: ``privpoints <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .pipeline import RunConfig, StageError, generate, run_pipeline, sweep


def _csv_list(text, cast=str):
    return [cast(v) for v in text.split(",") if v.strip()]


def _common(p):
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", help="privacy budget, or 'inf' for non-private")
    p.add_argument("--out", help="output directory")


def _data(p, flag="--data"):
    p.add_argument(flag, dest="data", help="CSV with a header row")
    p.add_argument("--columns", type=_csv_list, help="coordinate columns, e.g. lon,lat")
    p.add_argument("--unit", choices=["deg", "m"])
    p.add_argument("--mask", help="polygon file restricting the valid region")
    p.add_argument("--holdout", type=float, help="fraction of points held out for evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privpoints", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load, filter and normalize a coordinate CSV")
    _common(p)
    _data(p)

    p = sub.add_parser("privatize", help="flip real-point labels once (device-side upload)")
    _common(p)
    _data(p)

    p = sub.add_parser("train", help="train generator and discriminator")
    _common(p)
    _data(p)
    p.add_argument("--preset", choices=["paper", "desk"])
    p.add_argument("--arch", choices=["paper", "desk", "tiny"])

    p = sub.add_parser("generate", help="sample synthetic points from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", dest="n_generate", type=int)

    p = sub.add_parser("evaluate", help="Chamfer/EMD sampling protocol")
    _common(p)
    _data(p)
    p.add_argument("--checkpoint")
    p.add_argument("--samples", type=int)
    p.add_argument("--sample-size", dest="sample_size", type=int)
    p.add_argument("--cd-only", dest="with_emd", action="store_false", default=None)

    p = sub.add_parser("query", help="range / hotspot / facility workloads")
    p.add_argument("workload", choices=["range", "hotspot", "facility"])
    _common(p)
    _data(p, flag="--real")
    p.add_argument("--checkpoint")
    p.add_argument("--places")
    p.add_argument("--samples", type=int)
    p.add_argument("--sample-size", dest="sample_size", type=int)
    p.add_argument("--k", dest="ks", type=lambda s: _csv_list(s, int))
    p.add_argument("--radius", dest="radii", type=lambda s: _csv_list(s, float))
    p.add_argument("--granularity", dest="granularities", type=lambda s: _csv_list(s, int))
    p.add_argument("--variant", choices=["max-inf", "min-dist"])
    p.add_argument("--attraction-radius", dest="attraction_radius", type=float)

    p = sub.add_parser("sweep", help="privatize/train/evaluate/query per privacy budget")
    _common(p)
    _data(p)
    p.add_argument("--epsilons", type=_csv_list)
    p.add_argument("--preset", choices=["paper", "desk"])
    p.add_argument("--arch", choices=["paper", "desk", "tiny"])
    p.add_argument("--samples", type=int)
    p.add_argument("--sample-size", dest="sample_size", type=int)

    p = sub.add_parser("run", help="run the stages listed in a config file")
    _common(p)
    p.add_argument("--stages", type=_csv_list)
    return parser


STAGES_FOR = {
    "ingest": ["ingest"],
    "privatize": ["ingest", "privatize"],
    "train": ["ingest", "privatize", "train"],
    "generate": ["generate"],
    "evaluate": ["evaluate"],
    "query": ["query"],
    "sweep": ["privatize", "train", "evaluate", "query"],
}


def config_from_args(args) -> RunConfig:
    values = {k: v for k, v in vars(args).items()
              if v is not None and k not in ("command", "config", "workload")}
    if args.command in STAGES_FOR and "stages" not in values:
        values["stages"] = STAGES_FOR[args.command]
    if args.command == "query":
        values["queries"] = [args.workload]
    if args.config:
        return RunConfig.from_file(args.config, **values)
    return RunConfig.create(**values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except (ValueError, OSError) as exc:
        print(f"privpoints: bad configuration: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "generate":
            from .ingest import write_points
            from .model import ModelState
            state = ModelState.load(cfg.checkpoint)
            ps = generate(state, cfg.n_generate, cfg.seed)
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            write_points(out / "synthetic.csv", ps, columns=list(cfg.columns)[:ps.m],
                         header_lines=[f"config_sha256={cfg.digest()} seed={cfg.seed} stage=generate"])
            print(out / "synthetic.csv")
            return 0
        if args.command == "sweep":
            reports = sweep(cfg)
            print(json.dumps({eps: r.to_json() for eps, r in reports.items()}, indent=2))
            return 0
        report = run_pipeline(cfg)
    except StageError as exc:
        print(f"privpoints: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"privpoints: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(report.to_json(), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
