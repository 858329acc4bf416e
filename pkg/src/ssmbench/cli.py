"""Command-line front end: train, benchmark, compare, report.

Exit codes are a stable contract: 0 success, 2 usage/config problems,
3 numerical failure (divergence).
"""

from __future__ import annotations

import argparse
import os
import sys

from .bench import (
    ConfigError,
    REPORT_FILE,
    build_report,
    load_config,
    render_csv,
    render_markdown,
    run_benchmark,
    run_compare,
    save_run_result,
)
from .data import DatasetError, materialize
from .encoders import save_checkpoint
from .stats import StatsError
from .tensor import NonFiniteError
from .training import DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssmbench",
        description="State-space vision encoder benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one encoder for one seed")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--encoder", required=True,
                         help="encoder id from the config roster")
    p_train.add_argument("--seed", type=int, required=True,
                         help="fold seed (selects the data split)")
    p_train.add_argument("--out", default=None, help="output directory")

    p_bench = sub.add_parser("benchmark",
                             help="run every (encoder, fold) pair + report")
    p_bench.add_argument("--config", required=True)
    p_bench.add_argument("--out", default=None)
    p_bench.add_argument("--workers", type=int, default=None)

    p_cmp = sub.add_parser("compare",
                           help="pairwise significance over run results")
    p_cmp.add_argument("results_dir")
    p_cmp.add_argument("--alpha", type=float, default=0.05)

    p_rep = sub.add_parser("report", help="render the results table")
    p_rep.add_argument("results_dir")
    p_rep.add_argument("--format", choices=("markdown", "csv"),
                       default="markdown")
    return parser


def cmd_train(config_path: str, encoder_id: str, seed: int,
              out_dir=None) -> int:
    from .bench import build_manifest, execute_run

    config = load_config(config_path)
    roster_ids = [e.encoder_id for e in config.roster]
    if encoder_id not in roster_ids:
        raise ConfigError(
            f"unknown encoder {encoder_id!r}; roster: {roster_ids}")
    entry = next(e for e in config.roster if e.encoder_id == encoder_id)
    if not config.base_seed <= seed < config.base_seed + config.n_seeds:
        raise ConfigError(
            f"seed {seed} outside fold seeds {config.fold_seeds()}")
    fold = seed - config.base_seed

    out_dir = out_dir or config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    manifest = build_manifest(config.dataset)
    images, labels = materialize(manifest, config.dataset.image_size)
    rr, checkpoint, history = execute_run(config, images, labels, manifest,
                                          entry, fold)
    base = os.path.join(out_dir, f"{encoder_id}-fold{fold}")
    save_run_result(base + ".result", rr)
    save_checkpoint(base + ".ckpt", entry.spec, checkpoint.weights)
    from .training import history_lines

    with open(base + ".history", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(history_lines(history))
    print(f"checkpoint: {base}.ckpt (best epoch {checkpoint.epoch}, "
          f"val accuracy {checkpoint.validation_metric:.4f})")
    return EXIT_OK


def cmd_benchmark(config_path: str, out_dir=None, workers=None) -> int:
    out = run_benchmark(config_path, out_dir=out_dir, workers=workers,
                        log=lambda msg: print(msg))
    with open(os.path.join(out, REPORT_FILE), "r", encoding="utf-8") as fh:
        print(fh.read(), end="")
    return EXIT_OK


def cmd_compare(results_dir: str, alpha: float = 0.05) -> int:
    print(run_compare(results_dir, alpha=alpha), end="")
    return EXIT_OK


def cmd_report(results_dir: str, fmt: str = "markdown") -> int:
    report = build_report(results_dir)
    if fmt == "csv":
        text = render_csv(report)
        out_path = os.path.join(results_dir, "report.csv")
    else:
        text = render_markdown(report)
        out_path = os.path.join(results_dir, REPORT_FILE)
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.encoder, args.seed, args.out)
        if args.command == "benchmark":
            return cmd_benchmark(args.config, args.out, args.workers)
        if args.command == "compare":
            return cmd_compare(args.results_dir, args.alpha)
        if args.command == "report":
            return cmd_report(args.results_dir, args.format)
        parser.error(f"unknown command {args.command}")
    except (ConfigError, DatasetError, StatsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def entrypoint() -> None:  # console-script shim
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
