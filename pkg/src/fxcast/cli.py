"""Command-line entry points: pipeline stages, full runs, sweeps and a
bundled synthetic-data generator.

Exit codes: 0 success, 2 usage error, 3 data error, 4 training divergence,
5 missing or stale artifact.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .bars import serialize_csv
from .config import RunConfig, load_config, parse_override
from .errors import (
    ConfigHashMismatch,
    FxcastError,
    MissingArtifact,
    NonFiniteActivation,
    NonFiniteGradient,
    TrainingDiverged,
)
from .synthetic import generate_bars

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_ARTIFACT = 5


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML/JSON config file")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable; value is YAML-typed)",
    )


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for text in args.overrides:
        key, value = parse_override(text)
        overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if getattr(args, "input", None):
        overrides["input_csv"] = args.input
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fxcast",
        description="cluster-gated attention forecasting and event-driven backtesting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate deterministic synthetic OHLC bars")
    synth.add_argument("--bars", type=int, default=10_000)
    synth.add_argument("--interval", type=int, default=15)
    synth.add_argument("--symbol", default="SYN/USD")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--weekend-gaps", action="store_true")
    synth.add_argument("--out-csv", required=True)
    synth.set_defaults(func=cmd_synth)

    for name, help_text in [
        ("ingest", "parse and validate the input CSV"),
        ("features", "split with the gap and compute feature frames"),
        ("select-features", "rank candidate features and select the top set"),
        ("cluster", "fit the scaler, window samples and fit the clusterer"),
        ("train", "train one forecaster per cluster"),
        ("backtest", "forecast test events and replay the trading rules"),
        ("report", "write the summary report"),
        ("run", "run every stage in order"),
    ]:
        stage = sub.add_parser(name, help=help_text)
        _add_common(stage)
        if name == "ingest":
            stage.add_argument("--input", help="input CSV path (overrides config)")
            stage.add_argument("--validate-only", action="store_true",
                               help="validate without writing outputs")
        stage.set_defaults(func=cmd_stage, stage=name)

    sweep = sub.add_parser("sweep", help="run the pipeline over a parameter grid")
    _add_common(sweep)
    sweep.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    sweep.set_defaults(func=cmd_sweep)

    return parser


def cmd_synth(args) -> int:
    series = generate_bars(
        n_bars=args.bars,
        interval_minutes=args.interval,
        seed=args.seed,
        symbol=args.symbol,
        weekend_gaps=args.weekend_gaps,
    )
    Path(args.out_csv).write_text(serialize_csv(series), encoding="utf-8")
    print(f"wrote {len(series)} bars to {args.out_csv}")
    return EXIT_OK


def cmd_stage(args) -> int:
    config = _config_from_args(args)
    if args.stage == "run":
        summary = pipeline.run_pipeline(config)
        print(Path(config.out_dir, "report.txt").read_text(encoding="utf-8"), end="")
    elif args.stage == "ingest":
        summary = pipeline.stage_ingest(config, validate_only=args.validate_only)
        print(f"ingested {summary['bars']} bars "
              f"({summary['first']} .. {summary['last']}, {summary['gaps']} gaps)")
    else:
        summary = pipeline.STAGES[args.stage](config)
        print(json.dumps(summary, default=str))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    rows = pipeline.run_sweep(config, jobs=args.jobs)
    failures = [r for r in rows if r["status"] != "ok"]
    print(f"sweep finished: {len(rows) - len(failures)}/{len(rows)} cells ok")
    for row in failures:
        print(f"  failed cell {row}", file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (MissingArtifact, ConfigHashMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (TrainingDiverged, NonFiniteGradient, NonFiniteActivation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (FxcastError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
