"""``tvcustom`` command line.

Exit codes: 0 success, 2 configuration error, 3 missing dependency or I/O
failure, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, ExperimentConfig
from .errors import ContractError, DegenerateInputError, DependencyError, NumericalError
from .report import write_consolidated

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("tvcustom")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    s = argparse.SUPPRESS
    p.add_argument("--config", metavar="PATH", default=s, help="experiment configuration (JSON)")
    p.add_argument("--seed", type=int, metavar="N", default=s, help="override the master seed")
    p.add_argument("--out", metavar="DIR", default=s, help="output directory (default: config out_dir)")
    p.add_argument("--jobs", type=int, metavar="N", default=s, help="worker processes (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", default=s)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="tvcustom", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("finetune", parents=[common], help="train the base model and one fine-tune per database")
    p = sub.add_parser("extract", parents=[common], help="task vectors and similarity matrix from checkpoints")
    p.add_argument("--checkpoints", metavar="DIR", help="checkpoint directory (default: OUT/checkpoints)")
    p = sub.add_parser("personalize", parents=[common], help="run the few-shot personalization protocol")
    p.add_argument("--pre", metavar="PATH", help="base checkpoint (default: OUT/checkpoints/pre.tvck)")
    p.add_argument("--archive", metavar="PATH", help="task-vector archive (default: OUT/task_vectors.tvck)")
    p = sub.add_parser("report", parents=[common], help="merge run reports and emit plot data")
    p.add_argument("runs", nargs="+", metavar="RUN_DIR")
    p = sub.add_parser("simbench", parents=[common], help="generate and inspect the synthetic benchmark")
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    return parser


def _load_config(args) -> ExperimentConfig:
    path = getattr(args, "config", None)
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _run(args) -> None:
    cfg = _load_config(args)
    out = Path(getattr(args, "out", None) or cfg.out_dir)
    jobs = getattr(args, "jobs", 1)
    if jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    if args.command == "finetune":
        summary = harness.finetune(cfg, out)
        own = summary["own_database_srocc"]
        print(f"wrote {len(own) + 1} checkpoints to {out / harness.CHECKPOINT_DIR}")
        for task_id, v in own.items():
            print(f"  {task_id}: held-out SROCC {v:.4f}")
    elif args.command == "extract":
        tvs, sim = harness.extract_archive(args.checkpoints or out / harness.CHECKPOINT_DIR, out)
        print(f"wrote {len(tvs)} task vectors to {out / harness.ARCHIVE_FILE}")
        print(harness.similarity_csv(tvs, sim), end="")
    elif args.command == "personalize":
        report = harness.personalize(cfg, out, args.pre, args.archive, jobs=jobs)
        for a in report.aggregates():
            print(f"{a['arm']:<55} K={a['shots']:<4} SROCC {a['mean']:.4f} +- {a['std']:.4f}")
    elif args.command == "report":
        merged = write_consolidated(args.runs, out)
        print(f"merged {len(merged['runs'])} runs, {len(merged['records'])} records into {out}")
    elif args.command == "simbench":
        if args.print_config:
            print(cfg.dumps())
            return
        info = harness.simbench(cfg, out)
        print(json.dumps({"out": str(out), "min_angle_deg": info["min_angle_deg"]}))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except ConfigError as exc:
        print(f"tvcustom: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"tvcustom: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DependencyError, OSError, ContractError, DegenerateInputError) as exc:
        print(f"tvcustom: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
