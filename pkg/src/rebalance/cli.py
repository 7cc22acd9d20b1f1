"""Command line: ``rebalance run|validate|report``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from ._runtime import retain_freed_memory
from .experiments import WORKERS_ENV, ConfigError, load_config, run_experiment, settings_for, worker_count

logger = logging.getLogger("rebalance")


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else Path("results") / cfg.name
    workers = args.workers if args.workers is not None else worker_count()
    retain_freed_memory()
    path = run_experiment(cfg, out, workers)
    print(f"results written to {path}")
    return 0


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    settings = settings_for(cfg)
    runs = len(settings) * len(cfg.seeds) * len(cfg.agents)
    print(f"{cfg.name}: scenario {cfg.scenario}, {len(settings)} setting(s), {len(cfg.seeds)} seed(s), "
          f"{len(cfg.agents)} agent(s) -> {runs} training run(s)")
    return 0


def _cmd_report(args) -> int:
    root = Path(args.results)
    summary_path = root / "summary.json"
    if not summary_path.exists():
        print(f"no summary.json in {root}", file=sys.stderr)
        return 2
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    print(f"{summary['name']} ({summary['scenario']}); KL in {summary['kl_units']}")
    header = f"{'setting':<14} {'agent':<10} {'seeds':>5} {'served':>10} {'UN':>9} {'DUR %':>8} {'KL':>7}"
    print(header)
    print("-" * len(header))
    for setting, agents in summary["settings"].items():
        for agent, e in agents.items():
            kl = f"{e['kl_mean']:7.3f}" if "kl_mean" in e else f"{'-':>7}"
            print(f"{setting:<14} {agent:<10} {e['seeds']:>5} {e['reward_mean']:>10.1f} {e['un_mean']:>9.1f} "
                  f"{e['dur_mean']:>8.2f} {kl}")
    timings = root / "timings.csv"
    if timings.exists():
        with open(timings, newline="", encoding="utf-8") as fh:
            total = sum(float(r["seconds"]) for r in csv.DictReader(fh))
        print(f"total wall time {total:.1f} s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rebalance", description="Incentive rebalancing experiments for dockless bike sharing.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a YAML config")
    run.add_argument("config")
    run.add_argument("-o", "--out", help="results directory (default: results/<name>)")
    run.add_argument("-j", "--workers", type=int, help=f"worker threads (default: ${WORKERS_ENV} or 1)")
    run.set_defaults(func=_cmd_run)
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    val.set_defaults(func=_cmd_validate)
    rep = sub.add_parser("report", help="print the summary table of a results directory")
    rep.add_argument("results")
    rep.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
