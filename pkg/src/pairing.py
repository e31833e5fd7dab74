"""
Positive-pair minibatches for supervised non-contrastive training.

Position ``i`` of ``batch_a`` and ``batch_b`` always holds two different
sentences with the same predicate. Positions cycle over the classes so every
batch mixes as many predicates as possible.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from custom_types import LabelId
from data import LabeledSentence
from errors import ContractError, EmptyPairingError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairBatch:
    batch_a: tuple[LabeledSentence, ...]
    batch_b: tuple[LabeledSentence, ...]
    labels: tuple[LabelId, ...]

    def __len__(self) -> int:
        return len(self.labels)


def validate_pair_batch(batch: PairBatch, class_sizes: Mapping[LabelId, int] | None = None) -> bool:
    """
    True iff the three columns have equal length, every position is a
    same-label pair, and the two sides of a position are different samples
    whenever the class has at least two members (``class_sizes`` defaults to
    assuming it does).
    """
    if not len(batch.batch_a) == len(batch.batch_b) == len(batch.labels):
        return False
    for a, b, label in zip(batch.batch_a, batch.batch_b, batch.labels):
        if a.predicate != label or b.predicate != label:
            return False
        if a is b and (class_sizes is None or class_sizes.get(label, 2) >= 2):
            return False
    return True


class _PartnerPool:
    """Per-class partners drawn without replacement, reshuffled when used up."""

    def __init__(self, members: list[int], rng: np.random.Generator) -> None:
        self.members = members
        self.rng = rng
        self.queue: list[int] = []

    def draw(self, anchor: int) -> int:
        if not self.queue:
            self.queue = [self.members[i] for i in self.rng.permutation(len(self.members))]
        for position, candidate in enumerate(self.queue):
            if candidate != anchor:
                return self.queue.pop(position)
        # only the anchor itself is left in this round
        self.queue = [self.members[i] for i in self.rng.permutation(len(self.members))]
        return self.draw(anchor)


def build_pair_batches(
    dataset: Sequence[LabeledSentence],
    batch_size: int,
    seed: int,
) -> list[PairBatch]:
    """
    One epoch of positive-pair batches.

    Classes with fewer than two samples are left out. Every remaining sample is
    an anchor in ``batch_a`` exactly once; anchors are taken round-robin over
    the classes in a seeded order. A final batch of a single position is topped
    up with one resampled anchor so no sample loses its turn.
    """
    if batch_size < 2:
        raise ContractError(f"batch_size must be at least 2, got {batch_size}")

    members: dict[LabelId, list[int]] = defaultdict(list)
    for index, sample in enumerate(dataset):
        members[sample.predicate].append(index)
    eligible = sorted(label for label, indices in members.items() if len(indices) >= 2)
    skipped = sorted(label for label, indices in members.items() if len(indices) < 2)
    if skipped:
        logger.warning("Skipping %d classes with fewer than two samples: %s", len(skipped), skipped)
    if not eligible:
        raise EmptyPairingError("no class has the two samples needed to form a positive pair")

    rng = np.random.default_rng(seed)
    class_order = [eligible[i] for i in rng.permutation(len(eligible))]
    anchors = {label: [members[label][i] for i in rng.permutation(len(members[label]))] for label in class_order}
    partners = {label: _PartnerPool(members[label], rng) for label in class_order}

    sequence: list[int] = []
    cursor = {label: 0 for label in class_order}
    remaining = sum(len(a) for a in anchors.values())
    while remaining:
        for label in class_order:
            if cursor[label] < len(anchors[label]):
                sequence.append(anchors[label][cursor[label]])
                cursor[label] += 1
                remaining -= 1

    chunks = [sequence[i : i + batch_size] for i in range(0, len(sequence), batch_size)]
    if len(chunks[-1]) < 2:
        chunks[-1].append(_resample_anchor(chunks[-1][0], members, class_order, dataset, rng))

    batches = []
    for chunk in chunks:
        batch_a = tuple(dataset[i] for i in chunk)
        batch_b = tuple(dataset[partners[dataset[i].predicate].draw(i)] for i in chunk)
        batches.append(PairBatch(batch_a, batch_b, tuple(s.predicate for s in batch_a)))
    return batches


def _resample_anchor(
    last: int,
    members: Mapping[LabelId, list[int]],
    class_order: list[LabelId],
    dataset: Sequence[LabeledSentence],
    rng: np.random.Generator,
) -> int:
    """An extra anchor from the class after ``last``'s in round-robin order, drawn with replacement."""
    position = class_order.index(dataset[last].predicate)
    label = class_order[(position + 1) % len(class_order)]
    return members[label][int(rng.integers(len(members[label])))]
