"""Shared argument handling for the experiment scripts."""
import argparse
import logging
from pathlib import Path

from ordloc.config import parse_config
from ordloc.evalkit import plot_report, run_experiment


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--runs", type=int, help="number of seeds (default from config)")
    p.add_argument("--seed", type=int, default=None, help="first seed")
    p.add_argument("--out", default="runs/experiments")
    return p


def run(name: str, pipeline_factory, args) -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = parse_config(args.config)
    first = cfg.seed if args.seed is None else args.seed
    seeds = [first + i for i in range(args.runs or cfg.eval.runs)]
    out = Path(args.out) / name
    report = run_experiment(name, pipeline_factory(cfg), cfg, seeds, out)
    plot_report(report, out / "report.png")
    for metric in report.metrics:
        print(f"{metric:>16s} {report.format(metric)}")
    for failure in report.failures:
        print(f"seed {failure['seed']} failed: {failure['error']}")
