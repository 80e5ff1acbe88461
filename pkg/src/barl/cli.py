"""Command-line front end.

    barl run --config FILE [--seed S] [--out DIR]
    barl table --out DIR
    barl plot --out DIR

Exit codes: 0 success, 2 bad config or arguments, 3 run or I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from barl import report
from barl.errors import ContractError, RunError
from barl.loop import run_barl

log = logging.getLogger("barl")

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="barl", description="Active transition-query experiments.")
    p.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="execute seeded runs and write CSV logs")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed", type=int, help="run only this seed")
    run.add_argument("--out", type=Path, help="output root (overrides the config)")
    table = sub.add_parser("table", help="median queries-to-solved across seeds")
    table.add_argument("--out", required=True, type=Path)
    plot = sub.add_parser("plot", help="learning_curve.svg for every environment")
    plot.add_argument("--out", required=True, type=Path)
    return p


def run_dir(root: Path, env: str, strategy: str, seed: int) -> Path:
    return Path(root) / env / strategy / f"seed_{seed}"


def cmd_run(args) -> int:
    try:
        exp = report.load_config(args.config)
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seeds = [args.seed] if args.seed is not None else exp.seeds
    root = args.out if args.out is not None else Path(exp.out)
    for strategy in exp.strategies:
        for seed in seeds:
            cfg = exp.run_config(strategy, seed)
            try:
                result = run_barl(cfg)
            except RunError as exc:
                print(f"run failed in module {exc.module} at iteration {exc.iteration}: {exc}",
                      file=sys.stderr)
                return EXIT_RUN
            except ContractError as exc:
                print(f"run failed in module barl_loop at iteration 0: {exc}", file=sys.stderr)
                return EXIT_RUN
            try:
                out = report.write_logs(result, run_dir(root, cfg.env, strategy, seed))
            except OSError as exc:
                print(f"cannot write logs: {exc}", file=sys.stderr)
                return EXIT_RUN
            log.info("wrote %s (queries to solved: %s)", out, result.queries_to_solved)
    return EXIT_OK


def cmd_table(args) -> int:
    try:
        path = report.write_sample_complexity(args.out)
    except (OSError, KeyError, ValueError) as exc:
        print(f"cannot build table: {exc}", file=sys.stderr)
        return EXIT_RUN
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_plot(args) -> int:
    from barl.plotting import save_learning_curve

    try:
        runs = report.collect_runs(args.out)
        envs = sorted({r.env for r in runs})
        if not envs:
            print(f"no completed runs under {args.out}", file=sys.stderr)
            return EXIT_RUN
        for env in envs:
            path = save_learning_curve(env, [r for r in runs if r.env == env],
                                       Path(args.out) / env / "learning_curve.svg")
            log.info("wrote %s", path)
    except (OSError, KeyError, ValueError) as exc:
        print(f"cannot plot: {exc}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    return {"run": cmd_run, "table": cmd_table, "plot": cmd_plot}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
