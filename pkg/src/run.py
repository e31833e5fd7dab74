"""
Command-line entry point.

    python run.py train --synth --classes 8 --per-class 50 --seed 7 --out runs/synth
    python run.py eval runs/synth --data runs/synth/data/test.tsv
    python run.py diagnose runs/synth/stage2 --data runs/synth/data/train.tsv
    python run.py synth --classes 8 --per-class 200 --out synthetic.tsv
    python run.py sweep --synth --out runs/sweep

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 collapse
abort, 5 checkpoint error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from config import RunConfig
from data import LabelTable, dump_tsv, load_tsv, synth_generate
from errors import (
    CheckpointError,
    CollapseError,
    ConfigError,
    ContractError,
    DimensionError,
    EmptyInputError,
    EmptyPairingError,
    LabelError,
    ParseError,
    ReportError,
)
from metrics import emit_report, format_report
from pipeline import (
    LABELS_FILE,
    SWEEP_BATCH_SIZES,
    diagnose_checkpoint,
    evaluate_checkpoint,
    prepare_data,
    resolve_stage_dir,
    run_batch_size_sweep,
    run_joint,
    run_pipeline,
)

logger = logging.getLogger("run")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_COLLAPSE = 4
EXIT_CHECKPOINT = 5

TOP_SINGULAR_VALUES = 10


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    parser.add_argument("--data", default=None, help="TSV of sentence<TAB>predicate lines")
    parser.add_argument("--labels", default=None, help="label table, one predicate per line")
    parser.add_argument("--synth", action="store_true", default=None, help="train on generated sentences")
    parser.add_argument("--classes", type=int, default=None)
    parser.add_argument("--per-class", type=int, default=None)
    parser.add_argument("--vocab-per-class", type=int, default=None)
    parser.add_argument("--overlap", type=float, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lambda", dest="lam", type=float, default=None, help="weight of the non-contrastive loss in joint mode")
    parser.add_argument("--delta", type=float, default=None, help="EMA momentum of the target network")
    parser.add_argument("--momentum", type=float, default=None, help="SGD momentum")
    parser.add_argument("--stage1-epochs", type=int, default=None)
    parser.add_argument("--stage2-epochs", type=int, default=None)
    parser.add_argument("--stage3-epochs", type=int, default=None)
    parser.add_argument("--joint-epochs", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncere", description="Staged non-contrastive relation extraction.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="run the staged pipeline or the joint ablation")
    _add_run_options(train)
    train.add_argument("--mode", choices=("staged", "joint"), default=None)
    train.add_argument(
        "--classification-only",
        action="store_true",
        help="joint mode without evaluating the non-contrastive branch",
    )

    sweep = commands.add_parser("sweep", help="run the staged pipeline once per batch size")
    _add_run_options(sweep)
    sweep.add_argument("--sizes", type=int, nargs="+", default=list(SWEEP_BATCH_SIZES))

    evaluate = commands.add_parser("eval", help="score a saved classifier on a TSV")
    evaluate.add_argument("checkpoint", help="checkpoint file, stage directory or run directory")
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--labels", default=None)
    evaluate.add_argument("--out", default=None, help="write the report here instead of stdout")

    diagnose = commands.add_parser("diagnose", help="anisotropy and effective rank of a saved stage")
    diagnose.add_argument("checkpoint")
    diagnose.add_argument("--data", required=True)
    diagnose.add_argument("--labels", default=None)

    synth = commands.add_parser("synth", help="write a synthetic TSV")
    synth.add_argument("--classes", type=int, default=8)
    synth.add_argument("--per-class", type=int, default=200)
    synth.add_argument("--vocab-per-class", type=int, default=20)
    synth.add_argument("--overlap", type=float, default=0.3)
    synth.add_argument("--seed", type=int, default=7)
    synth.add_argument("--out", required=True)
    synth.add_argument("--labels-out", default=None, help="also write the matching label table")
    return parser


def configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then command-line flags."""
    cfg = RunConfig.from_json(args.config) if args.config is not None else RunConfig()
    overrides = {
        "data.train_path": args.data,
        "data.label_table_path": args.labels,
        "data.synthetic": args.synth,
        "data.classes": args.classes,
        "data.per_class": args.per_class,
        "data.vocab_per_class": args.vocab_per_class,
        "data.overlap": args.overlap,
        "pipeline.seed": args.seed,
        "pipeline.batch_size": args.batch_size,
        "pipeline.lambda": args.lam,
        "pipeline.momentum": args.momentum,
        "pipeline.stage1_epochs": args.stage1_epochs,
        "pipeline.stage3_epochs": args.stage3_epochs,
        "pipeline.joint_epochs": args.joint_epochs,
        "pipeline.mode": getattr(args, "mode", None),
        "byol.delta": args.delta,
        "byol.epochs": args.stage2_epochs,
        "output_dir": args.out,
    }
    cfg = cfg.with_overrides(overrides)
    if args.data is not None and args.synth is None:
        cfg = cfg.with_overrides({"data.synthetic": False})
    if not cfg.data.synthetic:
        cfg.validate()
    return cfg


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    out = Path(cfg.output_dir)
    split, table = prepare_data(cfg)

    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    for name, samples in (("train", split.train), ("eval", split.eval), ("test", split.test)):
        dump_tsv(samples, table, data_dir / f"{name}.tsv")

    if cfg.pipeline.mode == "joint":
        _, report = run_joint(split, cfg, table, out, classification_only=args.classification_only)
    else:
        report = run_pipeline(split, cfg, table, out)
    sys.stdout.write(format_report(report))
    logger.info("Report written to %s", out / "report.tsv")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    split, table = prepare_data(cfg)
    summary = run_batch_size_sweep(split, cfg, table, args.sizes, cfg.output_dir)
    sys.stdout.write(summary.to_csv(sep="\t", index=False, float_format="%.3f", lineterminator="\n"))
    return EXIT_OK


def _label_table_for(checkpoint: str, labels: Optional[str]) -> LabelTable:
    if labels is not None:
        return LabelTable.from_file(labels)
    stage_dir = resolve_stage_dir(checkpoint)
    for candidate in (stage_dir.parent / LABELS_FILE, stage_dir / LABELS_FILE):
        if candidate.is_file():
            return LabelTable.from_file(candidate)
    return LabelTable.default()


def cmd_eval(args: argparse.Namespace) -> int:
    table = _label_table_for(args.checkpoint, args.labels)
    samples = load_tsv(args.data, table)
    if not samples:
        raise EmptyInputError(f"no sentences in {args.data}")
    report = evaluate_checkpoint(args.checkpoint, samples, table)
    if args.out is not None:
        emit_report(report, args.out)
    else:
        sys.stdout.write(format_report(report))
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    table = _label_table_for(args.checkpoint, args.labels)
    samples = load_tsv(args.data, table)
    if len(samples) < 2:
        raise EmptyInputError(f"diagnostics need at least two sentences, {args.data} has {len(samples)}")
    snapshot = diagnose_checkpoint(args.checkpoint, samples)
    lines = [
        f"anisotropy\t{snapshot.anisotropy:.6f}",
        f"effective_rank\t{snapshot.effective_rank:.6f}",
    ]
    if snapshot.cross_class_anisotropy is not None:
        lines.append(f"cross_class_anisotropy\t{snapshot.cross_class_anisotropy:.6f}")
    top = snapshot.singular_values[:TOP_SINGULAR_VALUES]
    lines.append("singular_values\t" + " ".join(f"{value:.6f}" for value in top))
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    samples = synth_generate(args.classes, args.per_class, args.vocab_per_class, args.overlap, args.seed)
    table = LabelTable.for_classes(args.classes)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dump_tsv(samples, table, args.out)
    if args.labels_out is not None:
        table.save(args.labels_out)
    logger.info("Wrote %d sentences over %d classes to %s", len(samples), args.classes, args.out)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "synth": cmd_synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (ParseError, LabelError, EmptyInputError, EmptyPairingError, DimensionError, ReportError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    except CollapseError as exc:
        where = f" (diagnostics in {exc.diagnostics_path})" if exc.diagnostics_path else ""
        logger.error("Training collapsed: %s%s", exc, where)
        return EXIT_COLLAPSE
    except CheckpointError as exc:
        logger.error("%s", exc)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
