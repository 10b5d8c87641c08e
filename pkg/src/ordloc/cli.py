"""``ordloc`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, config as configlib, data as datalib, experiments
from .adapt import adapt_policy, evaluate_corloc, fine_tune_policy, write_adaptation_report
from .agent import train_stage2
from .data import ExemplaryMode
from .embed import embed_crops, ord_acc, prototype, train_stage1
from .evalkit import plot_report, run_experiment

log = logging.getLogger("ordloc")


class CliError(RuntimeError):
    pass


def make_run_dir(out: str | Path, command: str) -> Path:
    """``<out>/<timestamp>-<command>``; never reuses an existing directory."""
    base = Path(out) / f"{time.strftime('%Y%m%d-%H%M%S')}-{command}"
    path, n = base, 1
    while True:
        try:
            path.mkdir(parents=True, exist_ok=False)
            return path
        except FileExistsError:
            path = base.with_name(f"{base.name}-{n}")
            n += 1


def _setup_logging(run_dir: Path, verbose: bool) -> list:
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(run_dir / "run.log")
    fh.setFormatter(fmt)
    root.addHandler(fh)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(fmt)
    sh.setLevel(logging.WARNING if not verbose else logging.DEBUG)
    root.addHandler(sh)
    return [fh, sh]


def _load_samples(path) -> list:
    return datalib.load_dataset(path)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2))


# ---------------------------------------------------------------------------
# Commands


def cmd_ingest_mnist(args, cfg, run_dir):
    root = datalib.data_root(args.data_dir)
    if args.idx:
        dest = datalib.ingest_idx(*args.idx, root=root)
    else:
        csv = Path(args.csv) if args.csv else datalib.bundled_csv_path()
        dest = datalib.ingest_csv(csv, root)
    print(f"wrote {dest}")
    return {"path": str(dest)}


def cmd_synth_data(args, cfg, run_dir):
    src = datalib.MnistSource.load(args.data_dir)
    dest = Path(args.dest) if args.dest else run_dir / "data"
    digit = cfg.data.digit if args.digit is None else args.digit
    noise = args.noise or cfg.data.noise
    if args.two_digit:
        train = datalib.synth_two_digit(cfg.data.train_count, cfg.seed, src, "train")
        test = datalib.synth_two_digit(cfg.data.test_count, cfg.seed, src, "test")
    else:
        train = datalib.synth_cmnist(digit, cfg.data.train_count, noise, "train", cfg.seed, src)
        test = datalib.synth_cmnist(digit, cfg.data.test_count, noise, "test", cfg.seed, src, replace=False)
    datalib.save_dataset(train, dest / "train")
    datalib.save_dataset(test, dest / "test")
    print(f"wrote {len(train)} train / {len(test)} test images to {dest}")
    return {"train": str(dest / "train"), "test": str(dest / "test")}


def _maybe_query(samples, digit):
    if samples and isinstance(samples[0], datalib.TwoDigitSample):
        return [s.query(digit) for s in samples]
    return samples


def cmd_train_embed(args, cfg, run_dir):
    train = _load_samples(args.data)
    s1 = cfg.stage1
    if train and isinstance(train[0], datalib.TwoDigitSample):
        s1 = replace(s1, selective=True)
    model, history = train_stage1(s1, train, cfg.seed)
    ckpt = checkpoint.save_embedder(model, run_dir / "embedder")
    _write_json(run_dir / "stage1-history.json", history)
    result = {"checkpoint": str(ckpt)}
    if not s1.selective:
        result["train_ordacc"] = ord_acc(model, train, s1.perturb, cfg.eval.ordacc_passes, cfg.seed)
    print(json.dumps(result))
    return result


def cmd_train_agent(args, cfg, run_dir):
    model = checkpoint.load_embedder(args.embedder)
    before = checkpoint.param_digest_dir(args.embedder)
    train = _maybe_query(_load_samples(args.data), cfg.data.query_digit)
    policy, history = train_stage2(cfg.stage2, train, model, cfg.seed, log_path=run_dir / "stage2.jsonl")
    ckpt = checkpoint.save_policy(policy, run_dir / "policy")
    checkpoint.save_embedder(model, run_dir / "embedder-after")
    result = {"checkpoint": str(ckpt), "train_corloc": evaluate_corloc(policy, model, train),
              "embedder_unchanged": before == checkpoint.param_digest_dir(run_dir / "embedder-after")}
    print(json.dumps(result))
    return result


def _exemplary(path, mode, cfg):
    pool = _maybe_query(_load_samples(path), cfg.data.query_digit)
    return datalib.build_exemplary_set(pool, cfg.data.exemplary_size, mode, cfg.seed)


def cmd_adapt(args, cfg, run_dir):
    model = checkpoint.load_embedder(args.embedder)
    policy = checkpoint.load_policy(args.policy)
    pool = datalib.strip_boxes(_maybe_query(_load_samples(args.data), cfg.data.query_digit))
    ex = _exemplary(args.exemplars, ExemplaryMode.TEST_CROPS, cfg)
    stage3 = replace(cfg.stage3, seed=cfg.seed)
    adapted, history = adapt_policy(policy, model, pool, ex, stage3, log_path=run_dir / "stage3.jsonl")
    evals = {Path(p).name: _maybe_query(_load_samples(p), cfg.data.query_digit) for p in (args.eval_data or [])}
    report = write_adaptation_report(run_dir, policy, adapted, model, evals, stage3)
    print(json.dumps(report["sets"]))
    return report["sets"]


def cmd_finetune(args, cfg, run_dir):
    model = checkpoint.load_embedder(args.embedder)
    policy = checkpoint.load_policy(args.policy)
    ex = _exemplary(args.exemplars, ExemplaryMode.TRAIN_PAIRS, cfg)
    stage3 = replace(cfg.stage3, seed=cfg.seed)
    tuned, history = fine_tune_policy(policy, model, ex, stage3, log_path=run_dir / "finetune.jsonl")
    evals = {Path(p).name: _maybe_query(_load_samples(p), cfg.data.query_digit) for p in (args.eval_data or [])}
    report = write_adaptation_report(run_dir, policy, tuned, model, evals, stage3)
    print(json.dumps(report["sets"]))
    return report["sets"]


def cmd_eval(args, cfg, run_dir):
    model = checkpoint.load_embedder(args.embedder)
    samples = _maybe_query(_load_samples(args.data), cfg.data.query_digit)
    values = [evaluate_corloc(checkpoint.load_policy(p), model, samples, cfg.stage2.horizon, cfg.stage2.alpha)
              for p in args.policy]
    mean, std = float(np.mean(values)), float(np.std(values))
    print(f"CorLoc {100 * mean:.1f} ± {100 * std:.1f} ({len(values)} polic{'y' if len(values) == 1 else 'ies'})")
    return {"corloc": values, "mean": mean, "std": std}


def cmd_rank_baseline(args, cfg, run_dir):
    model = checkpoint.load_embedder(args.embedder)
    samples = _maybe_query(_load_samples(args.data), cfg.data.query_digit)
    ex = _exemplary(args.exemplars, ExemplaryMode.TEST_CROPS, cfg)
    value = experiments.ranking_corloc(cfg, model, samples, prototype(embed_crops(model, ex.crops())))
    print(f"ranking CorLoc {100 * value:.1f}")
    return {"corloc": value}


EXPERIMENTS = {
    "source": lambda cfg: lambda seed: experiments.source_domain(cfg, seed).metrics,
    "new-digits": lambda cfg: lambda seed: experiments.new_digits(cfg, seed),
    "backgrounds": lambda cfg: lambda seed: experiments.backgrounds(cfg, seed),
    "rewards": lambda cfg: lambda seed: experiments.reward_comparison(cfg, seed),
    "selective": lambda cfg: lambda seed: {f"corloc_m{int(m)}": experiments.selective(cfg, m, seed)["corloc"]
                                           for m in cfg.eval.selective_margins},
}


def cmd_report(args, cfg, run_dir):
    runs = args.runs or cfg.eval.runs
    seeds = [cfg.seed + i for i in range(runs)]
    report = run_experiment(args.experiment, EXPERIMENTS[args.experiment](cfg), cfg, seeds, run_dir)
    plot_report(report, run_dir / "report.png")
    for m in report.metrics:
        print(f"{m:>16s} {report.format(m)}")
    if report.failures:
        raise CliError(f"{len(report.failures)} of {runs} runs failed; see {run_dir / 'report.json'}")
    return report.summary()


COMMANDS = {
    "ingest-mnist": cmd_ingest_mnist,
    "synth-data": cmd_synth_data,
    "train-embed": cmd_train_embed,
    "train-agent": cmd_train_agent,
    "adapt": cmd_adapt,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "rank-baseline": cmd_rank_baseline,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ordloc", description="Query-object localization with ordinal rewards.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (unknown keys are rejected)")
    common.add_argument("--out", help="parent directory for run directories")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--data-dir", help="MNIST store (default $ORDLOC_DATA_DIR or ./data)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-mnist", parents=[common], help="store MNIST digits for synthesis")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--idx", nargs=4, metavar=("TRAIN_IMG", "TRAIN_LBL", "TEST_IMG", "TEST_LBL"))
    g.add_argument("--csv", help="label-first CSV of 784 pixels (default: the 5k sample bundled with mlxtend)")

    p = sub.add_parser("synth-data", parents=[common], help="write train/test image datasets")
    p.add_argument("--digit", type=int)
    p.add_argument("--noise", choices=[k.value for k in datalib.NoiseKind])
    p.add_argument("--two-digit", action="store_true")
    p.add_argument("--dest", help="dataset directory (default: inside the run directory)")

    p = sub.add_parser("train-embed", parents=[common], help="train the ordinal embedding")
    p.add_argument("--data", required=True)

    p = sub.add_parser("train-agent", parents=[common], help="train the localization policy")
    p.add_argument("--data", required=True)
    p.add_argument("--embedder", required=True)

    for name in ("adapt", "finetune"):
        p = sub.add_parser(name, parents=[common],
                           help="test-time adaptation" if name == "adapt" else "fine-tune on exemplars")
        p.add_argument("--embedder", required=True)
        p.add_argument("--policy", required=True)
        if name == "adapt":
            p.add_argument("--data", required=True, help="unlabeled target images (boxes ignored)")
        p.add_argument("--exemplars", required=True, help="annotated pool the exemplary set is drawn from")
        p.add_argument("--eval-data", nargs="*", help="datasets for the before/after report")

    p = sub.add_parser("eval", parents=[common], help="CorLoc of one or more policies")
    p.add_argument("--embedder", required=True)
    p.add_argument("--policy", required=True, nargs="+")
    p.add_argument("--data", required=True)

    p = sub.add_parser("rank-baseline", parents=[common], help="CorLoc of proposal ranking")
    p.add_argument("--embedder", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--exemplars", required=True)

    p = sub.add_parser("report", parents=[common], help="repeat a named experiment over seeds")
    p.add_argument("--experiment", required=True, choices=sorted(EXPERIMENTS))
    p.add_argument("--runs", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = []
    try:
        cfg = configlib.parse_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
        if args.data_dir is not None:
            os.environ["ORDLOC_DATA_DIR"] = args.data_dir
        run_dir = make_run_dir(cfg.out, args.command)
        configlib.dump_config(cfg, run_dir / "effective-config.json")
        handlers = _setup_logging(run_dir, args.verbose)
        result = COMMANDS[args.command](args, cfg, run_dir)
        _write_json(run_dir / "result.json", result)
        return 0
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - top-level boundary: report, never traceback
        error = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        log.debug("command failed", exc_info=True)
        print(json.dumps(error), file=sys.stderr)
        return 2
    finally:
        for h in handlers:
            logging.getLogger().removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
