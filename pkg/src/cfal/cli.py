"""Command line interface.

Subcommands: ``run`` and ``sweep`` execute an experiment config, ``verify``
runs the property suites, ``world`` dumps a fixture world.  Exit codes:
0 success, 1 runtime failure (including failed verification), 2 bad config.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import ConfigError, ExperimentConfig, fixture, run_experiment, run_sweep, write_outputs
from .verify import SUITES, run_suites
from .worlds import dump_world_json


def _load_config(path: str, overrides: argparse.Namespace) -> ExperimentConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if overrides.seed is not None:
        doc["seed"] = overrides.seed
    if overrides.trials is not None:
        doc["trials"] = overrides.trials
    if overrides.out is not None:
        doc["out"] = overrides.out
    if overrides.ablate:
        doc["ablate"] = sorted(set(doc.get("ablate", [])) | set(overrides.ablate.split(",")))
    return ExperimentConfig.from_doc(doc)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("config", help="path to a JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the root seed")
    p.add_argument("--trials", type=int, default=None, help="override the trial count")
    p.add_argument("--out", default=None, help="output path prefix (.csv and .meta.json)")
    p.add_argument(
        "--ablate",
        default=None,
        help="comma list from {clipping,regularizer,debias,mis,dbal} to switch off",
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cfal")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment config")
    _add_common(run_p)
    sweep_p = sub.add_parser("sweep", help="run a parameter sweep over the config's grids")
    _add_common(sweep_p)

    verify_p = sub.add_parser("verify", help="run property suites")
    verify_p.add_argument(
        "suite", nargs="?", default="all", help=f"one of {', '.join(SUITES)} or 'all'"
    )

    world_p = sub.add_parser("world", help="print a fixture world as JSON")
    world_p.add_argument("fixture")
    world_p.add_argument("--dump", action="store_true", help="print the world document")
    world_p.add_argument("--out", default=None, help="write the document to a file")

    args = parser.parse_args(argv)
    try:
        if args.command in ("run", "sweep"):
            cfg = _load_config(args.config, args)
            csv_text, meta = run_experiment(cfg) if args.command == "run" else run_sweep(cfg)
            if cfg.out:
                write_outputs(csv_text, meta, cfg.out)
                print(f"wrote {cfg.out}.csv and {cfg.out}.meta.json")
            else:
                sys.stdout.write(csv_text)
                sys.stdout.write(json.dumps(meta, sort_keys=True) + "\n")
            return 0
        if args.command == "verify":
            names = None if args.suite == "all" else [args.suite]
            if names and names[0] not in SUITES:
                raise ConfigError(f"unknown suite {names[0]!r}; choose from {', '.join(SUITES)}")
            return 0 if run_suites(names) else 1
        if args.command == "world":
            world, hclass, meta = fixture(args.fixture)
            text = dump_world_json(world, hclass)
            if args.out:
                with open(args.out, "w") as f:
                    f.write(text + "\n")
                print(f"wrote {args.out}")
            else:
                print(text)
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
