#!/usr/bin/env python3
"""
Command-line entry point for ELAS training, evaluation, ablations, the cost
model and benchmarks.

Exit codes: 0 completed, 1 ELAS error, 2 usage error, 3 diverged run.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from .core.config import configure_logging, get_settings, load_train_config
from .core.exceptions import ElasError
from .schemas.costmodel import MODEL_PRESETS
from .schemas.train import SparsifierKind, preset_overrides
from .services import bench, costmodel
from .services.ablation import run_sparsifier_ablation, run_warmup_ablation
from .services.trainer import evaluate_checkpoint, run_training

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")


def _positive_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}")
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {number}")
    return number


def _str_list(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key=value config file")
    parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config value (repeatable)",
    )
    parser.add_argument(
        "--preset",
        default="desk",
        choices=sorted(preset_overrides()),
        help="Base preset (default: desk)",
    )


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(
        prog="elas", description="Low-rank training with 2:4 activation sparsity"
    )
    parser.add_argument(
        "--log-level",
        default=settings.log_level,
        choices=["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"],
        type=str.upper,
        help=f"Log level (default: {settings.log_level})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Run one training job")
    _add_config_args(train)
    train.add_argument("--resume", type=Path, help="Checkpoint to continue from")

    evaluate = sub.add_parser("eval", help="Evaluate a checkpoint on its eval split")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument(
        "--batches", type=_positive_int, help="Limit the number of eval batches"
    )

    warmup = sub.add_parser("ablate-warmup", help="Sweep dense warmup lengths")
    _add_config_args(warmup)
    warmup.add_argument("--list", type=_int_list, required=True, help="e.g. 0,100,200,400")
    warmup.add_argument("--out", type=Path, help="CSV table path")

    variants = sub.add_parser("ablate-sparsifier", help="Sweep sparsifier variants")
    _add_config_args(variants)
    variants.add_argument(
        "--variants",
        type=_str_list,
        default=[k.value for k in SparsifierKind],
        help="Comma-separated subset of naive,soft_weights,soft_activation",
    )
    variants.add_argument("--out", type=Path, help="CSV table path")

    cost = sub.add_parser("costmodel", help="FFN activation-memory tables")
    cost_settings = settings.costmodel_settings
    cost.add_argument("--preset", default=cost_settings.preset, choices=sorted(MODEL_PRESETS))
    cost.add_argument("--seq", type=int, default=cost_settings.seq_len)
    cost.add_argument("--batches", type=_int_list, default=cost_settings.batches)
    cost.add_argument("--rank", type=int, help="Count projections as rank-r factor pairs")
    cost.add_argument("--out", type=Path, help=".csv or .txt table; all tables when a directory")

    bench_parser = sub.add_parser("bench", help="Kernel microbenchmarks")
    bench_settings = settings.bench_settings
    bench_parser.add_argument("--op", choices=["sparsify", "spmm", "pack", "probe"], default="sparsify")
    bench_parser.add_argument("--shape", action="append", help="MxN or MxKxN (repeatable)")
    bench_parser.add_argument("--variants", type=_str_list, default=[SparsifierKind.NAIVE.value])
    bench_parser.add_argument("--repetitions", type=int, default=bench_settings.repetitions)
    bench_parser.add_argument("--threads", type=int, default=bench_settings.threads)
    bench_parser.add_argument("--steps", type=int, default=200, help="Training steps for --op probe")
    bench_parser.add_argument("--every", type=int, default=20, help="Probe interval for --op probe")
    bench_parser.add_argument("--preset", default="desk", choices=sorted(preset_overrides()))
    bench_parser.add_argument("--out", type=Path, help="CSV report path")
    return parser


def _print_frame(frame: pd.DataFrame) -> None:
    print(frame.to_string(index=frame.index.name is not None))


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_train_config(args.config, args.override, args.preset)
    result = run_training(config, resume_from=args.resume)
    final = result.final
    print(f"status: {result.status.value}")
    print(f"step {final.step}: eval_loss={final.eval_loss:.4f} eval_ppl={final.eval_ppl:.3f}")
    print(f"metrics: {result.metrics_path}")
    if result.checkpoint_path:
        print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_DIVERGED if result.diverged else EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    result = evaluate_checkpoint(args.checkpoint, max_batches=args.batches)
    print(f"eval_loss={result.loss:.4f} eval_ppl={result.perplexity:.3f} tokens={result.tokens}")
    return EXIT_OK


def _cmd_ablate_warmup(args: argparse.Namespace) -> int:
    config = load_train_config(args.config, args.override, args.preset)
    out = args.out or config.output_dir / "warmup_ablation.csv"
    _print_frame(run_warmup_ablation(config, args.list, out=out))
    return EXIT_OK


def _cmd_ablate_sparsifier(args: argparse.Namespace) -> int:
    config = load_train_config(args.config, args.override, args.preset)
    out = args.out or config.output_dir / "sparsifier_ablation.csv"
    _print_frame(run_sparsifier_ablation(config, args.variants, out=out))
    return EXIT_OK


def _cmd_costmodel(args: argparse.Namespace) -> int:
    table = costmodel.memory_table(args.preset, args.seq, args.batches)
    _print_frame(table)
    estimate = costmodel.spmm_flop_model(args.preset, args.seq, args.rank)
    measured = (
        f", published measurement {estimate.measured_speedup:.2f}x"
        if estimate.measured_speedup is not None
        else ""
    )
    print(f"ideal FFN speedup {estimate.ffn_ideal_speedup:.3f}x{measured}")
    if args.out is not None:
        if args.out.suffix:
            costmodel.write_table(table, args.out)
        else:
            costmodel.emit_tables(args.out, preset=args.preset, seq_len=args.seq, batches=args.batches)
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    shapes = args.shape or get_settings().bench_settings.shapes
    if args.op == "probe":
        config = load_train_config(preset=args.preset)
        frame = bench.probe_natural_sparsity(config, args.steps, args.every)
    else:
        if args.op == "sparsify":
            reports = bench.bench_sparsify(shapes, args.variants, args.repetitions, args.threads)
        elif args.op == "spmm":
            reports = bench.bench_spmm(shapes, args.repetitions)
        else:
            reports = bench.bench_pack(shapes, args.repetitions)
        frame = bench.reports_frame(reports)
    _print_frame(frame)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(args.out, index=False)
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate-warmup": _cmd_ablate_warmup,
    "ablate-sparsifier": _cmd_ablate_sparsifier,
    "costmodel": _cmd_costmodel,
    "bench": _cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    configure_logging(level=args.log_level)
    settings = get_settings()
    logger.info(f"{settings.app_name} v{settings.version}: {args.command}")
    try:
        return COMMANDS[args.command](args)
    except ElasError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
