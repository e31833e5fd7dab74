"""
Training stages as mesa models: one ``step()`` is one epoch, and a
``DataCollector`` keeps the per-epoch loss and diagnostics history.
"""

from __future__ import annotations

import logging
import math
from typing import Sequence

import mesa
import numpy as np
import pandas as pd

from autodiff.base import Module, Parameter
from autodiff.layers import Dense, Linear
from autodiff.optim import OptimizerState, sgd_step
from autodiff.tensor import Tensor, l2_normalize
from byol import NetworkPair, build_pair, ema_update, init_pair, represent, train_step
from config import RunConfig
from data import DatasetSplit, LabeledSentence, LabelTable
from encoder import Encoder, freeze_all, freeze_all_but_last
from errors import CollapseError, DegenerateVectorError
from losses import byol_loss, cross_entropy_with_logits, total_loss
from metrics import DiagnosticsSnapshot, EvalReport, diagnose, evaluate_predictions
from pairing import build_pair_batches

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "mean_loss", "anisotropy", "effective_rank", "cross_class_anisotropy", "eval_macro_f1"]


class ClassifierHead(Module):
    """
    A nonlinear layer followed by a linear map onto the class logits.
    """

    def __init__(self, name: str, in_features: int, hidden: int, num_classes: int, activation: str, rng) -> None:
        super().__init__(name)
        self.hidden = self.add_module(Dense(f"{name}.hidden", in_features, hidden, activation, rng))
        self.output = self.add_module(Linear(f"{name}.output", hidden, num_classes, rng))

    def forward(self, x: Tensor) -> Tensor:
        return self.output(self.hidden(x))


def _texts(samples: Sequence[LabeledSentence]) -> list[str]:
    return [s.text for s in samples]


def _labels(samples: Sequence[LabeledSentence]) -> list[int]:
    return [s.predicate for s in samples]


def _minibatches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def classifier_features(pair: NetworkPair, samples: Sequence[LabeledSentence], normalize: bool) -> np.ndarray:
    """Inputs of the downstream linear classifier, one row per sample."""
    reps = represent(pair, samples)
    try:
        return (l2_normalize(reps) if normalize else reps).data
    except DegenerateVectorError as exc:
        raise CollapseError(f"representation collapsed before classification: {exc}") from exc


class TrainingStage(mesa.Model):
    """
    Base class for all training stages.

    Subclasses implement ``train_epoch`` (returning the mean loss),
    ``representations`` (what the diagnostics look at) and ``parameters``.
    """

    stage_name = "stage"

    def __init__(self, cfg: RunConfig, split: DatasetSplit, epochs: int, seed: int) -> None:
        super().__init__()
        self.reset_randomizer(seed)
        self.cfg = cfg
        self.split = split
        self.epochs = epochs
        self.seed = seed
        self.rng = np.random.default_rng(seed)

        self.current_epoch = 0
        self.mean_loss = math.nan
        self.eval_macro_f1 = math.nan
        self.snapshot: DiagnosticsSnapshot | None = None
        self.snapshots: list[DiagnosticsSnapshot] = []

        self.datacollector = mesa.DataCollector(
            {
                "epoch": lambda m: m.current_epoch,
                "mean_loss": lambda m: m.mean_loss,
                "anisotropy": lambda m: m.snapshot.anisotropy,
                "effective_rank": lambda m: m.snapshot.effective_rank,
                "cross_class_anisotropy": lambda m: (
                    math.nan if m.snapshot.cross_class_anisotropy is None else m.snapshot.cross_class_anisotropy
                ),
                "eval_macro_f1": lambda m: m.eval_macro_f1,
            }
        )

    def train_epoch(self) -> float:
        raise NotImplementedError

    def representations(self) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def diagnose(self) -> DiagnosticsSnapshot:
        return diagnose(self.representations().data, _labels(self.split.train), seed=self.seed)

    def step(self):
        """
        Advance the stage by one epoch.
        """
        self.current_epoch += 1
        try:
            self.mean_loss = self.train_epoch()
            try:
                self.snapshot = self.diagnose()
            except DegenerateVectorError as exc:
                raise CollapseError(f"degenerate representations after epoch {self.current_epoch}: {exc}") from exc
        except CollapseError as exc:
            self.running = False
            exc.snapshot = self._safe_snapshot()
            logger.warning("%s collapsed in epoch %d: %s", self.stage_name, self.current_epoch, exc)
            raise

        self.snapshots.append(self.snapshot)
        self.datacollector.collect(self)
        logger.info(
            "%s epoch %d/%d: loss %.6f, anisotropy %.4f, effective rank %.3f",
            self.stage_name,
            self.current_epoch,
            self.epochs,
            self.mean_loss,
            self.snapshot.anisotropy,
            self.snapshot.effective_rank,
        )
        if self.current_epoch >= self.epochs:
            self.running = False

    def _safe_snapshot(self) -> DiagnosticsSnapshot | None:
        try:
            return self.diagnose()
        except (DegenerateVectorError, CollapseError):
            return None

    def history(self) -> pd.DataFrame:
        frame = self.datacollector.get_model_vars_dataframe()
        return frame.reindex(columns=HISTORY_COLUMNS).reset_index(drop=True)


class FineTuneStage(TrainingStage):
    """
    Stage 1: an encoder with all but its last layer frozen, under a nonlinear
    classification head, trained with cross-entropy for a few epochs.
    """

    stage_name = "stage1"

    def __init__(self, cfg: RunConfig, split: DatasetSplit, num_classes: int, seed: int) -> None:
        super().__init__(cfg, split, cfg.pipeline.stage1_epochs, seed)
        self.encoder = Encoder(cfg.encoder, cfg.tokenizer, self.rng)
        self.head = ClassifierHead(
            "head", self.encoder.output_dim, cfg.pipeline.head_hidden, num_classes, cfg.pipeline.head_activation, self.rng
        )
        freeze_all_but_last(self.encoder, cfg.encoder.trainable_layers)
        self.optimizer = OptimizerState(cfg.pipeline.stage1_learning_rate, cfg.pipeline.momentum)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.head.parameters()

    def train_epoch(self) -> float:
        train = self.split.train
        total = 0.0
        for index in _minibatches(self.rng.permutation(len(train)), self.cfg.pipeline.batch_size):
            batch = [train[i] for i in index]
            loss = cross_entropy_with_logits(self.head(self.encoder.features(_texts(batch))), _labels(batch))
            total += loss.item() * len(batch)
            loss.backward()
            sgd_step(self.parameters(), self.optimizer)
        return total / len(train)

    def representations(self) -> Tensor:
        return self.encoder.encode_texts(_texts(self.split.train))


class NonContrastiveStage(TrainingStage):
    """
    Stage 2: the stage-1 encoder, fully frozen, under an online/target pair
    trained on positive pairs.
    """

    stage_name = "stage2"

    def __init__(self, cfg: RunConfig, split: DatasetSplit, encoder: Encoder, seed: int) -> None:
        super().__init__(cfg, split, cfg.byol.epochs, seed)
        freeze_all(encoder)
        self.pair = init_pair(encoder, cfg.byol, seed)
        self.optimizer = OptimizerState(cfg.byol.learning_rate, cfg.pipeline.momentum)

    def parameters(self) -> list[Parameter]:
        return self.pair.parameters()

    def train_epoch(self) -> float:
        batches = build_pair_batches(self.split.train, self.cfg.pipeline.batch_size, self.random.randrange(2**32))
        total = 0.0
        count = 0
        for batch in batches:
            total += train_step(self.pair, batch, self.optimizer) * len(batch)
            count += len(batch)
        return total / count

    def representations(self) -> Tensor:
        return represent(self.pair, self.split.train)


class ClassifierStage(TrainingStage):
    """
    Stage 3: the pair is frozen and a fresh linear layer learns the predicates
    from its representations.
    """

    stage_name = "stage3"

    def __init__(self, cfg: RunConfig, split: DatasetSplit, pair: NetworkPair, label_table: LabelTable, seed: int) -> None:
        super().__init__(cfg, split, cfg.pipeline.stage3_epochs, seed)
        pair.freeze()
        self.pair = pair
        self.label_table = label_table
        self.train_features = classifier_features(pair, split.train, cfg.encoder.normalize)
        self.classifier = Linear("classifier", self.train_features.shape[1], len(label_table), self.rng)
        self.optimizer = OptimizerState(cfg.pipeline.stage3_learning_rate, cfg.pipeline.momentum)

    def parameters(self) -> list[Parameter]:
        return self.pair.parameters() + self.classifier.parameters()

    def train_epoch(self) -> float:
        labels = np.asarray(_labels(self.split.train))
        total = 0.0
        for index in _minibatches(self.rng.permutation(len(labels)), self.cfg.pipeline.batch_size):
            loss = cross_entropy_with_logits(self.classifier(Tensor(self.train_features[index])), labels[index])
            total += loss.item() * len(index)
            loss.backward()
            sgd_step(self.classifier.parameters(), self.optimizer)
        if self.split.eval:
            self.eval_macro_f1 = self.evaluate(self.split.eval).macro_f1
        return total / len(labels)

    def representations(self) -> Tensor:
        return Tensor(self.train_features)

    def evaluate(self, samples: Sequence[LabeledSentence]) -> EvalReport:
        return evaluate_classifier(self.pair, self.classifier, samples, self.label_table, self.cfg.encoder.normalize)


def evaluate_classifier(
    pair: NetworkPair,
    classifier: Linear,
    samples: Sequence[LabeledSentence],
    label_table: LabelTable,
    normalize: bool,
) -> EvalReport:
    logits = classifier(Tensor(classifier_features(pair, samples, normalize))).data
    return evaluate_predictions(_labels(samples), logits, label_table.names)


class JointModel(TrainingStage):
    """
    Single-phase ablation: classification on ``batch_a`` plus ``lam`` times the
    non-contrastive loss, all trained together. With ``classification_only``
    the non-contrastive branch is never evaluated.
    """

    stage_name = "joint"

    def __init__(
        self,
        cfg: RunConfig,
        split: DatasetSplit,
        label_table: LabelTable,
        seed: int,
        classification_only: bool = False,
    ) -> None:
        super().__init__(cfg, split, cfg.pipeline.joint_epochs, seed)
        self.classification_only = classification_only
        self.lam = cfg.pipeline.lam
        self.label_table = label_table

        self.encoder = Encoder(cfg.encoder, cfg.tokenizer, self.rng, name="online.encoder")
        freeze_all_but_last(self.encoder, cfg.encoder.trainable_layers)
        self.pair = build_pair(self.encoder, cfg.byol, self.rng)
        self.head = ClassifierHead(
            "head", self.encoder.output_dim, cfg.pipeline.head_hidden, len(label_table), cfg.pipeline.head_activation, self.rng
        )
        self.optimizer = OptimizerState(cfg.pipeline.joint_learning_rate, cfg.pipeline.momentum)

    def parameters(self) -> list[Parameter]:
        return self.pair.parameters() + self.head.parameters()

    def trained_parameters(self) -> list[Parameter]:
        if self.classification_only:
            return self.encoder.parameters() + self.head.parameters()
        return self.pair.online.parameters() + self.head.parameters()

    def train_epoch(self) -> float:
        batches = build_pair_batches(self.split.train, self.cfg.pipeline.batch_size, self.random.randrange(2**32))
        total = 0.0
        count = 0
        for batch in batches:
            loss = cross_entropy_with_logits(self.head(self.encoder.features(_texts(batch.batch_a))), batch.labels)
            if not self.classification_only:
                try:
                    loss = total_loss(loss, byol_loss(batch.batch_a, batch.batch_b, self.pair), self.lam)
                except DegenerateVectorError as exc:
                    raise CollapseError(f"degenerate representation during joint training: {exc}") from exc
            total += loss.item() * len(batch)
            count += len(batch)
            loss.backward()
            sgd_step(self.trained_parameters(), self.optimizer)
            ema_update(self.pair)
        if self.split.eval:
            self.eval_macro_f1 = self.evaluate(self.split.eval).macro_f1
        return total / count

    def representations(self) -> Tensor:
        return represent(self.pair, self.split.train)

    def evaluate(self, samples: Sequence[LabeledSentence]) -> EvalReport:
        logits = self.head(self.encoder.features(_texts(samples))).data
        return evaluate_predictions(_labels(samples), logits, self.label_table.names)
