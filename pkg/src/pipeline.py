"""
The three-stage pipeline, the joint ablation and the batch-size sweep.

A run directory looks like::

    <out>/labels.txt
    <out>/stage1/{checkpoint.bin,history.csv,config.json}
    <out>/stage2/...
    <out>/stage3/...
    <out>/report.tsv

A stage whose directory is complete and whose ``config.json`` matches the
current configuration is loaded instead of retrained.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from autodiff.checkpoint import CheckpointEntry, decode_checkpoint, encode_checkpoint, restore_parameters
from autodiff.layers import Linear
from byol import NetworkPair, init_pair, represent
from config import RunConfig
from data import DatasetSplit, LabeledSentence, LabelTable, load_tsv, split_equal, synth_generate
from encoder import Encoder
from errors import CheckpointError, CollapseError, DimensionError
from metrics import DiagnosticsSnapshot, EvalReport, diagnose, emit_report, evaluate_predictions
from model import (
    ClassifierHead,
    ClassifierStage,
    FineTuneStage,
    JointModel,
    NonContrastiveStage,
    TrainingStage,
    evaluate_classifier,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.bin"
HISTORY_FILE = "history.csv"
CONFIG_FILE = "config.json"
COLLAPSE_FILE = "collapse.json"
REPORT_FILE = "report.tsv"
LABELS_FILE = "labels.txt"
SUMMARY_FILE = "summary.tsv"

SWEEP_BATCH_SIZES = (8, 64, 128, 256)


@dataclass
class StageArtifacts:
    """Everything a stage leaves behind: parameters, history and diagnostics."""

    stage: str
    checkpoint: bytes
    history: pd.DataFrame
    snapshots: list[DiagnosticsSnapshot] = field(default_factory=list)
    directory: Optional[Path] = None

    def entries(self) -> list[CheckpointEntry]:
        return decode_checkpoint(self.checkpoint)

    def save(self, directory: Path, cfg: RunConfig) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / CHECKPOINT_FILE).write_bytes(self.checkpoint)
        self.history.to_csv(directory / HISTORY_FILE, index=False, lineterminator="\n")
        (directory / CONFIG_FILE).write_text(cfg.to_json(), encoding="utf-8")
        self.directory = directory

    @classmethod
    def load(cls, directory: Path, stage: str) -> "StageArtifacts":
        try:
            checkpoint = (directory / CHECKPOINT_FILE).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint in {directory}: {exc}") from exc
        decode_checkpoint(checkpoint)
        return cls(stage, checkpoint, pd.read_csv(directory / HISTORY_FILE), [], directory)


def _reusable(directory: Optional[Path], cfg: RunConfig) -> bool:
    if directory is None:
        return False
    files = [directory / name for name in (CHECKPOINT_FILE, HISTORY_FILE, CONFIG_FILE)]
    if not all(path.is_file() for path in files):
        return False
    return (directory / CONFIG_FILE).read_text(encoding="utf-8") == cfg.to_json()


def _stage_dir(out_dir: Path | str | None, stage: str) -> Optional[Path]:
    return Path(out_dir) / stage if out_dir is not None else None


def _train(model: TrainingStage, directory: Optional[Path]) -> None:
    """Run a stage to completion, dumping diagnostics if it collapses."""
    try:
        model.run_model()
    except CollapseError as exc:
        if directory is not None:
            directory.mkdir(parents=True, exist_ok=True)
            model.history().to_csv(directory / HISTORY_FILE, index=False, lineterminator="\n")
            dump = {
                "stage": model.stage_name,
                "epoch": model.current_epoch,
                "message": str(exc),
                "snapshot": dataclasses.asdict(exc.snapshot) if exc.snapshot is not None else None,
            }
            path = directory / COLLAPSE_FILE
            path.write_text(json.dumps(dump, indent=2) + "\n", encoding="utf-8")
            exc.diagnostics_path = path
        raise


def _finish(model: TrainingStage, cfg: RunConfig, directory: Optional[Path]) -> StageArtifacts:
    artifacts = StageArtifacts(
        model.stage_name, encode_checkpoint(model.parameters()), model.history(), list(model.snapshots)
    )
    if directory is not None:
        artifacts.save(directory, cfg)
    return artifacts


def prepare_data(cfg: RunConfig) -> tuple[DatasetSplit, LabelTable]:
    """Load or synthesise the corpus named by ``cfg`` and split it three ways."""
    if cfg.data.synthetic:
        table = (
            LabelTable.from_file(cfg.data.label_table_path)
            if cfg.data.label_table_path
            else LabelTable.for_classes(cfg.data.classes)
        )
        samples = synth_generate(
            cfg.data.classes, cfg.data.per_class, cfg.data.vocab_per_class, cfg.data.overlap, cfg.seed
        )
    else:
        cfg.validate()
        table = LabelTable.from_file(cfg.data.label_table_path) if cfg.data.label_table_path else LabelTable.default()
        samples = load_tsv(cfg.data.train_path, table)
    split = split_equal(samples, cfg.seed)
    logger.info(
        "Data: %d train, %d eval, %d test sentences over %d predicates",
        len(split.train),
        len(split.eval),
        len(split.test),
        len(table),
    )
    return split, table


def load_encoder(entries: Sequence[CheckpointEntry], cfg: RunConfig, name: str = "encoder") -> Encoder:
    encoder = Encoder(cfg.encoder, cfg.tokenizer, np.random.default_rng(0), name=name)
    restore_parameters(encoder.parameters(), entries)
    return encoder


def load_pair(entries: Sequence[CheckpointEntry], cfg: RunConfig) -> NetworkPair:
    pair = init_pair(Encoder(cfg.encoder, cfg.tokenizer, np.random.default_rng(0)), cfg.byol, 0)
    restore_parameters(pair.parameters(), entries)
    return pair


def _output_width(entries: Sequence[CheckpointEntry], name: str, label_table: LabelTable) -> CheckpointEntry:
    entry = next((e for e in entries if e.name == name), None)
    if entry is None:
        raise CheckpointError(f"checkpoint has no {name!r} entry")
    if entry.values.shape[1] != len(label_table):
        raise DimensionError(
            f"label table has {len(label_table)} predicates but the checkpoint classifies "
            f"{entry.values.shape[1]}",
            (len(label_table),),
            entry.values.shape,
        )
    return entry


def load_classifier(entries: Sequence[CheckpointEntry], label_table: LabelTable) -> Linear:
    weight = _output_width(entries, "classifier.weight", label_table)
    in_features, out_features = weight.values.shape
    classifier = Linear("classifier", in_features, out_features, np.random.default_rng(0))
    restore_parameters(classifier.parameters(), entries)
    return classifier


def stage1_finetune(
    split: DatasetSplit,
    cfg: RunConfig,
    label_table: LabelTable,
    out_dir: Path | str | None = None,
) -> StageArtifacts:
    """Fine-tune the encoder's last layer under a classification head."""
    directory = _stage_dir(out_dir, "stage1")
    model = FineTuneStage(cfg, split, len(label_table), seed=cfg.seed)
    _train(model, directory)
    return _finish(model, cfg, directory)


def stage2_noncontrastive(
    stage1: StageArtifacts,
    split: DatasetSplit,
    cfg: RunConfig,
    out_dir: Path | str | None = None,
) -> StageArtifacts:
    """Train the online/target pair on positive pairs over the frozen stage-1 encoder."""
    directory = _stage_dir(out_dir, "stage2")
    model = NonContrastiveStage(cfg, split, load_encoder(stage1.entries(), cfg), seed=cfg.seed + 1)
    _train(model, directory)
    return _finish(model, cfg, directory)


def stage3_classify(
    stage2: StageArtifacts,
    split: DatasetSplit,
    cfg: RunConfig,
    label_table: LabelTable,
    out_dir: Path | str | None = None,
) -> tuple[StageArtifacts, EvalReport]:
    """Fit a linear classifier on frozen representations and score it on the test split."""
    directory = _stage_dir(out_dir, "stage3")
    model = ClassifierStage(cfg, split, load_pair(stage2.entries(), cfg), label_table, seed=cfg.seed + 2)
    _train(model, directory)
    artifacts = _finish(model, cfg, directory)
    return artifacts, model.evaluate(split.test)


def _evaluate_stage3(artifacts: StageArtifacts, samples, cfg: RunConfig, label_table: LabelTable) -> EvalReport:
    entries = artifacts.entries()
    return evaluate_classifier(
        load_pair(entries, cfg), load_classifier(entries, label_table), samples, label_table, cfg.encoder.normalize
    )


def _prepare_out_dir(out_dir: Path | str | None, label_table: LabelTable) -> Optional[Path]:
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    label_table.save(out / LABELS_FILE)
    return out


def run_pipeline(
    split: DatasetSplit,
    cfg: RunConfig,
    label_table: LabelTable,
    out_dir: Path | str | None = None,
) -> EvalReport:
    """
    Stage 1, stage 2 and stage 3 in order, resuming from any complete stage
    directory written with the same configuration.
    """
    out = _prepare_out_dir(out_dir, label_table)

    stage1_dir = _stage_dir(out, "stage1")
    if _reusable(stage1_dir, cfg):
        logger.info("Reusing stage 1 from %s", stage1_dir)
        stage1 = StageArtifacts.load(stage1_dir, "stage1")
    else:
        stage1 = stage1_finetune(split, cfg, label_table, out)

    stage2_dir = _stage_dir(out, "stage2")
    if _reusable(stage2_dir, cfg):
        logger.info("Reusing stage 2 from %s", stage2_dir)
        stage2 = StageArtifacts.load(stage2_dir, "stage2")
    else:
        stage2 = stage2_noncontrastive(stage1, split, cfg, out)

    stage3_dir = _stage_dir(out, "stage3")
    if _reusable(stage3_dir, cfg):
        logger.info("Reusing stage 3 from %s", stage3_dir)
        report = _evaluate_stage3(StageArtifacts.load(stage3_dir, "stage3"), split.test, cfg, label_table)
    else:
        _, report = stage3_classify(stage2, split, cfg, label_table, out)

    logger.info("Test macro F1 %.3f (precision %.3f, recall %.3f)", report.macro_f1, report.macro_precision, report.macro_recall)
    if out is not None:
        emit_report(report, out / REPORT_FILE)
    return report


def run_joint(
    split: DatasetSplit,
    cfg: RunConfig,
    label_table: LabelTable,
    out_dir: Path | str | None = None,
    classification_only: bool = False,
) -> tuple[StageArtifacts, EvalReport]:
    """Single-phase training of classification plus ``lambda`` times the non-contrastive loss."""
    out = _prepare_out_dir(out_dir, label_table)
    directory = _stage_dir(out, "joint")
    model = JointModel(cfg, split, label_table, seed=cfg.seed, classification_only=classification_only)
    _train(model, directory)
    artifacts = _finish(model, cfg, directory)
    report = model.evaluate(split.test)
    logger.info("Joint test macro F1 %.3f (lambda %.3f)", report.macro_f1, cfg.pipeline.lam)
    if out is not None:
        emit_report(report, out / REPORT_FILE)
    return artifacts, report


def run_batch_size_sweep(
    split: DatasetSplit,
    cfg: RunConfig,
    label_table: LabelTable,
    sizes: Iterable[int] = SWEEP_BATCH_SIZES,
    out_dir: Path | str | None = None,
) -> pd.DataFrame:
    """Run the full pipeline once per batch size and tabulate the macro scores."""
    rows = []
    for size in sizes:
        run_dir = Path(out_dir) / f"batch_{size}" if out_dir is not None else None
        sized = cfg.with_overrides({"pipeline.batch_size": size, "output_dir": str(run_dir) if run_dir else None})
        logger.info("Sweep: batch size %d", size)
        report = run_pipeline(split, sized, label_table, run_dir)
        rows.append([size, report.macro_precision, report.macro_recall, report.macro_f1])
    summary = pd.DataFrame(rows, columns=["batch_size", "macro_precision", "macro_recall", "macro_f1"])
    if out_dir is not None:
        summary.to_csv(Path(out_dir) / SUMMARY_FILE, sep="\t", index=False, float_format="%.3f", lineterminator="\n")
    return summary


def resolve_stage_dir(path: Path | str) -> Path:
    """
    Accept a checkpoint file, a stage directory or a run directory; the latest
    stage of a run directory wins.
    """
    path = Path(path)
    if path.is_file():
        path = path.parent
    if (path / CHECKPOINT_FILE).is_file():
        return path
    for stage in ("stage3", "joint", "stage2", "stage1"):
        if (path / stage / CHECKPOINT_FILE).is_file():
            return path / stage
    raise CheckpointError(f"no checkpoint found under {path}")


def _load_stage(path: Path | str) -> tuple[Path, RunConfig, list[CheckpointEntry]]:
    directory = resolve_stage_dir(path)
    cfg = RunConfig.from_json(directory / CONFIG_FILE)
    try:
        blob = (directory / CHECKPOINT_FILE).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint in {directory}: {exc}") from exc
    return directory, cfg, decode_checkpoint(blob)


def evaluate_checkpoint(
    path: Path | str,
    samples: Sequence[LabeledSentence],
    label_table: LabelTable,
) -> EvalReport:
    """Score a saved classifier (stage 1, stage 3 or joint) on ``samples``."""
    directory, cfg, entries = _load_stage(path)
    names = {entry.name for entry in entries}
    if "classifier.weight" in names:
        return evaluate_classifier(
            load_pair(entries, cfg),
            load_classifier(entries, label_table),
            samples,
            label_table,
            cfg.encoder.normalize,
        )
    if "head.output.weight" in names:
        encoder_name = "online.encoder" if "online.encoder.embedding.weight" in names else "encoder"
        encoder = load_encoder(entries, cfg, encoder_name)
        output = _output_width(entries, "head.output.weight", label_table)
        head = ClassifierHead(
            "head",
            encoder.output_dim,
            output.values.shape[0],
            len(label_table),
            cfg.pipeline.head_activation,
            np.random.default_rng(0),
        )
        restore_parameters(head.parameters(), entries)
        logits = head(encoder.features([s.text for s in samples])).data
        return evaluate_predictions([s.predicate for s in samples], logits, label_table.names)
    raise CheckpointError(f"checkpoint in {directory} holds no classifier")


def diagnose_checkpoint(path: Path | str, samples: Sequence[LabeledSentence]) -> DiagnosticsSnapshot:
    """Anisotropy and effective rank of a saved stage's representations of ``samples``."""
    _, cfg, entries = _load_stage(path)
    names = {entry.name for entry in entries}
    if any(name.startswith("online.projector.") for name in names):
        reps = represent(load_pair(entries, cfg), samples)
    else:
        reps = load_encoder(entries, cfg).encode_texts([s.text for s in samples])
    return diagnose(reps.data, [s.predicate for s in samples], seed=cfg.seed)
