"""
Corpus ingestion, label tables, equal three-way splits and the synthetic
sentence generator used for desk-scale runs.

Input TSV: UTF-8, LF line endings, ``sentence<TAB>predicate`` per line, no
header. Label table files hold one predicate name per line; line order defines
the label ids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from custom_types import LabelId
from errors import ContractError, LabelError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_PREDICATES = (
    "complicates",
    "inhibits_than",
    "stimulates",
    "augments",
    "compared_with",
    "higher_than",
    "associated_with",
    "causes",
    "affects",
    "disrupts",
    "occurs_in",
    "neg_affects",
    "produces",
    "manifestation_of",
    "process_of",
    "interacts_with",
    "precedes",
    "method_of",
    "neg_interacts_with",
    "diagnoses",
    "treats",
    "uses",
    "administered_to",
    "prevents",
    "part_of",
    "location_of",
    "isa",
    "coexists_with",
)

MIN_SENTENCE_TOKENS = 5
MAX_SENTENCE_TOKENS = 12


@dataclass(frozen=True)
class LabeledSentence:
    text: str
    predicate: LabelId


class LabelTable:
    """
    Ordered predicate names; a name's position is its label id.
    """

    def __init__(self, names: Iterable[str]) -> None:
        self.names = tuple(names)
        if not self.names:
            raise ContractError("label table is empty")
        self._ids = {name: index for index, name in enumerate(self.names)}
        if len(self._ids) != len(self.names):
            duplicates = sorted({n for n in self.names if self.names.count(n) > 1})
            raise ContractError(f"duplicate predicate names in label table: {', '.join(duplicates)}")

    @classmethod
    def default(cls) -> "LabelTable":
        return cls(DEFAULT_PREDICATES)

    @classmethod
    def for_classes(cls, num_classes: int) -> "LabelTable":
        """The first ``num_classes`` default predicates, padded with ``class_<k>`` names."""
        names = list(DEFAULT_PREDICATES[:num_classes])
        names += [f"class_{k}" for k in range(len(names), num_classes)]
        return cls(names)

    @classmethod
    def from_file(cls, path: Path | str) -> "LabelTable":
        text = Path(path).read_text(encoding="utf-8")
        return cls(line.strip() for line in text.split("\n") if line.strip())

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelTable) and other.names == self.names

    def index(self, name: str) -> LabelId:
        return self._ids[name]

    def name(self, label: LabelId) -> str:
        return self.names[label]

    def save(self, path: Path | str) -> None:
        Path(path).write_text("".join(f"{name}\n" for name in self.names), encoding="utf-8")


@dataclass(frozen=True)
class DatasetSplit:
    train: list[LabeledSentence]
    eval: list[LabeledSentence]
    test: list[LabeledSentence]


def load_tsv(path: Path | str, label_table: LabelTable) -> list[LabeledSentence]:
    """
    Parse ``sentence<TAB>predicate`` lines in file order.

    Malformed lines raise ParseError with the 1-based line number; all unknown
    predicate names are collected and reported together in one LabelError.
    """
    content = Path(path).read_text(encoding="utf-8")
    lines = content.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    samples: list[LabeledSentence] = []
    unknown: list[tuple[int, str]] = []
    for number, line in enumerate(lines, start=1):
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError(f"expected 2 tab-separated columns, found {len(fields)}", number)
        text, predicate = fields
        if not text.strip():
            raise ParseError("empty sentence", number)
        if predicate not in label_table:
            unknown.append((number, predicate))
            continue
        samples.append(LabeledSentence(text, label_table.index(predicate)))

    if unknown:
        raise LabelError(unknown)
    logger.debug("Loaded %d sentences from %s", len(samples), path)
    return samples


def dump_tsv(samples: Iterable[LabeledSentence], label_table: LabelTable, path: Path | str) -> None:
    Path(path).write_text(
        "".join(f"{s.text}\t{label_table.name(s.predicate)}\n" for s in samples),
        encoding="utf-8",
    )


def split_equal(data: Sequence[LabeledSentence], seed: int) -> DatasetSplit:
    """
    Seeded shuffle, then contiguous thirds. A remainder of one goes to train, a
    remainder of two to train and eval.
    """
    if len(data) < 3:
        raise ContractError(f"need at least 3 samples to split three ways, got {len(data)}")
    order = np.random.default_rng(seed).permutation(len(data))
    base, remainder = divmod(len(data), 3)
    train_size = base + (1 if remainder >= 1 else 0)
    eval_size = base + (1 if remainder == 2 else 0)

    shuffled = [data[i] for i in order]
    return DatasetSplit(
        train=shuffled[:train_size],
        eval=shuffled[train_size : train_size + eval_size],
        test=shuffled[train_size + eval_size :],
    )


def class_vocabularies(num_classes: int, vocab_per_class: int, overlap: float) -> list[list[str]]:
    """
    Word lists per class: ``round(overlap * vocab_per_class)`` words come from a
    pool shared by every class, the rest are private to the class.
    """
    shared_count = int(round(overlap * vocab_per_class))
    shared = [f"shared{j}" for j in range(shared_count)]
    return [
        [f"c{k}term{j}" for j in range(vocab_per_class - shared_count)] + shared
        for k in range(num_classes)
    ]


def synth_generate(
    num_classes: int,
    per_class: int,
    vocab_per_class: int = 20,
    overlap: float = 0.3,
    seed: int = 7,
) -> list[LabeledSentence]:
    """
    Generate ``per_class`` sentences for each of ``num_classes`` labels.

    Each sentence holds 5-12 words drawn uniformly from its class vocabulary.
    Output is grouped by class in label order and fully determined by ``seed``.
    """
    if num_classes < 2:
        raise ContractError(f"need at least 2 classes, got {num_classes}")
    if per_class < 2:
        raise ContractError(f"need at least 2 samples per class, got {per_class}")
    if vocab_per_class < 1:
        raise ContractError(f"vocab_per_class must be positive, got {vocab_per_class}")
    if not 0.0 <= overlap <= 1.0:
        raise ContractError(f"overlap must lie in [0, 1], got {overlap}")

    rng = np.random.default_rng(seed)
    samples = []
    for label, vocabulary in enumerate(class_vocabularies(num_classes, vocab_per_class, overlap)):
        for _ in range(per_class):
            length = int(rng.integers(MIN_SENTENCE_TOKENS, MAX_SENTENCE_TOKENS + 1))
            words = rng.choice(len(vocabulary), size=length)
            samples.append(LabeledSentence(" ".join(vocabulary[w] for w in words), label))
    return samples
