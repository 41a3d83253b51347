"""Command-line entry point: ``robustnas {oracle,search,sweep,report,selfcheck}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness, selfcheck
from .datagen import make_dataset


def _config(args) -> harness.ExperimentConfig:
    if args.config:
        cfg = harness.ExperimentConfig.load(args.config)
    else:
        cfg = harness.desk_config(args.space or "T5")
    if args.space and args.config:
        cfg = dataclasses.replace(cfg, space=args.space)
    if getattr(args, "strategy", None):
        cfg = dataclasses.replace(cfg, strategy=args.strategy)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=[args.seed],
                                  search=dataclasses.replace(cfg.search, seed=args.seed))
    if args.out:
        cfg = dataclasses.replace(cfg, out=args.out)
    if getattr(args, "oracle", None):
        cfg = dataclasses.replace(cfg, oracle=args.oracle)
    cfg.__post_init__()
    return cfg


def cmd_oracle(args) -> int:
    cfg = _config(args)
    out = harness._resolve_out(cfg.out)
    harness._ensure_writable(out)
    space = cfg.space_spec()
    table = harness.build_oracle(space, make_dataset(cfg.data), cfg.protocol, cfg.oracle_seeds,
                                 cfg.k, args.jobs)
    path = out / f"oracle_{cfg.space}.csv"
    table.save(path)
    best = table.best()
    print(f"{len(table)} genotypes -> {path}")
    print(f"best {best.genotype} test error {best.test_error:.4f}")
    return 0


def cmd_search(args) -> int:
    cfg = _config(args)
    run_dir = harness.run(cfg)
    res = json.loads((run_dir / "result.json").read_text())
    print(f"{res['strategy']} seed {res['seed']}: {res['genotype']}")
    if "test_regret" in res:
        print(f"test regret {res['test_regret']:.4f}")
    print(run_dir)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    root = harness.sweep(cfg, jobs=args.jobs)
    stats = json.loads((root / "correlation.json").read_text())
    print(f"{stats['num_runs']} runs -> {root}")
    if stats.get("pearson_lambda_regret") is not None:
        print(f"pearson(lambda_max, regret) = {stats['pearson_lambda_regret']:.3f} "
              f"(n={stats['pearson_n']})")
    return 0


def cmd_report(args) -> int:
    out = harness._resolve_out(args.out)
    dirs = []
    for d in map(Path, args.runs):
        # a sweep root expands to its run directories
        if (d / "sweep_config.json").exists():
            dirs.extend(sorted(p for p in d.iterdir() if p.is_dir()))
        else:
            dirs.append(d)
    stats = harness.report(dirs, out)
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0


def cmd_selfcheck(args) -> int:
    failed = 0
    for name, ok, detail in selfcheck.run_all():
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustnas")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, strategy=False):
        p.add_argument("--config", help="ExperimentConfig JSON; defaults to the desk config")
        p.add_argument("--space", help="search-space preset (T2..T5)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output directory (default ${harness.OUT_ENV})")
        p.add_argument("--jobs", type=int, default=1)
        if strategy:
            p.add_argument("--strategy", choices=harness.STRATEGIES)
            p.add_argument("--oracle", help="oracle CSV for regret columns")

    common(sub.add_parser("oracle", help="train every genotype of a finite space"))
    common(sub.add_parser("search", help="one search run"), strategy=True)
    common(sub.add_parser("sweep", help="runs over the config's l2/drop-path axes and seeds"),
           strategy=True)
    rep = sub.add_parser("report", help="summarize run directories")
    rep.add_argument("runs", nargs="+")
    rep.add_argument("--out")
    sub.add_parser("selfcheck", help="run the analytic oracles")
    return parser


COMMANDS = {"oracle": cmd_oracle, "search": cmd_search, "sweep": cmd_sweep,
            "report": cmd_report, "selfcheck": cmd_selfcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
