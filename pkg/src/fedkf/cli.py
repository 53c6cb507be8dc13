"""Command-line entry point.

Exit codes: 0 on success, 1 on invalid input or configuration, 2 on any
runtime failure (missing data, diverging training, I/O errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import FedKFError, ValidationError

log = logging.getLogger("fedkf")


def _load(args):
    from .config import load_config

    config = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = (args.seed,)
    if getattr(args, "out", None) is not None:
        changes["output_dir"] = args.out
    if getattr(args, "rounds", None) is not None:
        changes["rounds"] = args.rounds
    if getattr(args, "data_dir", None) is not None:
        import dataclasses

        changes["dataset"] = dataclasses.replace(config.dataset, data_dir=args.data_dir)
    if changes:
        config = config.replace(**changes)
    if getattr(args, "algorithm", None) is not None or getattr(args, "t1", None) is not None:
        config = config.with_algorithm(args.algorithm or config.algorithm.name, args.t1)
    return config


def cmd_partition(args) -> int:
    from . import experiment

    config = _load(args)
    path = experiment.cmd_partition(config, None if args.out is None else f"{args.out}/{experiment.MANIFEST}")
    print(path)
    return 0


def cmd_run(args) -> int:
    from . import experiment

    print(experiment.cmd_run(_load(args), resume=args.resume))
    return 0


def cmd_report(args) -> int:
    from . import experiment

    print(experiment.cmd_report(args.run_dirs, args.out, plots=not args.no_plots), end="")
    return 0


def cmd_check_bounds(args) -> int:
    from . import experiment

    report = experiment.cmd_check_bounds(args.profile, args.mixtures, args.seed or 0)
    print(json.dumps(report, indent=2))
    return 0 if report["holds"] else 2


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.configs, args.seed or 0)
    bad = [r for r in results if not r.ok]
    worst = max(results, key=lambda r: r.rel_error)
    print(f"{len(results)} checks, {len(bad)} above {TOLERANCE:g}; worst {worst.name} rel err {worst.rel_error:.2e}")
    for r in bad:
        print(f"FAIL {r.name}: {r.rel_error:.3e}")
    return 0 if not bad else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedkf", description="Federated knowledge-fusion experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per round")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", required=True, help="YAML config file or preset:NAME")
        p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        p.add_argument("--out", help=out_help)
        p.add_argument("--data-dir", help="dataset directory (overrides $FEDKF_DATA_DIR)")

    p = sub.add_parser("partition", help="partition the dataset and write the manifest")
    common(p, "directory for partition.json (default: output_dir)")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("run", help="train every configured seed")
    common(p, "run directory (overrides output_dir)")
    p.add_argument("--resume", action="store_true", help="continue from the last saved checkpoint")
    p.add_argument("--rounds", type=int, help="override the number of rounds")
    p.add_argument("--algorithm", choices=("fedavg", "fedprox", "fedgkd", "qffl", "fedkf"))
    t1 = p.add_mutually_exclusive_group()
    t1.add_argument("--t1", dest="t1", action="store_const", const=True, help="enable cache-slot aggregation")
    t1.add_argument("--no-t1", dest="t1", action="store_const", const=False, help="disable cache-slot aggregation")
    p.set_defaults(func=cmd_run, t1=None)

    p = sub.add_parser("report", help="summarize run directories into a table and plots")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", help="directory for summary.csv, summary.txt and plots")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("check-bounds", help="verify MP >= WLP over random client mixtures")
    p.add_argument("profile", help="JSON profile or records.jsonl (last round is used)")
    p.add_argument("--mixtures", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_check_bounds)

    p = sub.add_parser("gradcheck", help="compare autograd gradients with finite differences")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FedKFError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
