"""
Classification scores and representation diagnostics.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from autodiff.tensor import EPSILON, Tensor
from errors import ContractError, DegenerateVectorError, DimensionError, ReportError

logger = logging.getLogger(__name__)

EXACT_PAIR_LIMIT = 512
SAMPLED_PAIRS = 10_000
REPORT_COLUMNS = ["predicate", "precision", "recall", "f1", "support"]


def predict(logits) -> int:
    """Index of the largest logit; ties go to the lowest index."""
    values = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise DimensionError("predict needs a non-empty logit vector", values.shape)
    return int(np.argmax(values))


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    @classmethod
    def from_predictions(cls, truth: Sequence[int], predicted: Sequence[int], num_classes: int) -> "ConfusionMatrix":
        if len(truth) != len(predicted):
            raise DimensionError("truth and predictions differ in length", (len(truth),), (len(predicted),))
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(truth, dtype=np.int64), np.asarray(predicted, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassScores:
    name: str
    precision: float
    recall: float
    f1: float
    support: int
    undefined: bool = False


def f1_from(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def per_class_prf(cm: ConfusionMatrix, names: Sequence[str] | None = None) -> list[ClassScores]:
    """
    Precision, recall and F1 per class. A zero denominator scores 0 and sets
    ``undefined`` on the row.
    """
    names = list(names) if names is not None else [str(k) for k in range(cm.num_classes)]
    if len(names) != cm.num_classes:
        raise DimensionError("one name per class expected", (len(names),), cm.counts.shape)
    rows = []
    for k, name in enumerate(names):
        tp = int(cm.counts[k, k])
        predicted = int(cm.counts[:, k].sum())
        actual = int(cm.counts[k, :].sum())
        precision = tp / predicted if predicted else 0.0
        recall = tp / actual if actual else 0.0
        rows.append(ClassScores(name, precision, recall, f1_from(precision, recall), actual, not (predicted and actual)))
    return rows


def macro_average(rows: Sequence[ClassScores]) -> tuple[float, float, float]:
    """Unweighted mean of per-class precision, recall and F1."""
    if not rows:
        raise ContractError("macro average needs at least one class")
    return (
        float(np.mean([r.precision for r in rows])),
        float(np.mean([r.recall for r in rows])),
        float(np.mean([r.f1 for r in rows])),
    )


@dataclass
class EvalReport:
    """
    Per-class rows in label-table order plus macro averages. Classes that never
    occur and are never predicted are kept as rows but left out of the macro
    averages.
    """

    rows: list[ClassScores]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: ConfusionMatrix | None = field(default=None, repr=False)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, names: Sequence[str]) -> "EvalReport":
        rows = per_class_prf(cm, names)
        predicted = cm.counts.sum(axis=0)
        present = [r for k, r in enumerate(rows) if r.support or predicted[k]]
        if len(present) < len(rows):
            logger.debug("%d classes are absent from the evaluated data", len(rows) - len(present))
        flagged = [r.name for r in present if r.undefined]
        if flagged:
            logger.warning("Undefined precision or recall (scored 0) for: %s", ", ".join(flagged))
        precision, recall, f1 = macro_average(present or rows)
        return cls(rows, precision, recall, f1, cm)

    @property
    def total_support(self) -> int:
        return sum(r.support for r in self.rows)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            [[r.name, r.precision, r.recall, r.f1, r.support] for r in self.rows],
            columns=REPORT_COLUMNS,
        )
        average = pd.DataFrame(
            [["average", self.macro_precision, self.macro_recall, self.macro_f1, self.total_support]],
            columns=REPORT_COLUMNS,
        )
        return pd.concat([frame, average], ignore_index=True)


def format_report(report: EvalReport) -> str:
    buffer = io.StringIO()
    report.to_frame().to_csv(buffer, sep="\t", index=False, float_format="%.3f", lineterminator="\n")
    return buffer.getvalue()


def emit_report(report: EvalReport, path: Path | str) -> None:
    """Write the report as TSV, values rounded to 3 decimals, ``average`` row last."""
    try:
        Path(path).write_text(format_report(report), encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot write report ({exc.strerror})", path) from exc


def read_report(path: Path | str) -> pd.DataFrame:
    try:
        return pd.read_csv(path, sep="\t", keep_default_na=False)
    except OSError as exc:
        raise ReportError(f"cannot read report ({exc.strerror})", path) from exc


def _as_matrix(reps) -> np.ndarray:
    if isinstance(reps, Tensor):
        return reps.data
    if isinstance(reps, np.ndarray):
        return np.asarray(reps, dtype=np.float64)
    return np.stack([r.data if isinstance(r, Tensor) else np.asarray(r, dtype=np.float64) for r in reps])


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms <= EPSILON):
        raise DegenerateVectorError("anisotropy is undefined for a zero-norm representation")
    return matrix / norms


def _pair_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n <= EXACT_PAIR_LIMIT:
        return np.triu_indices(n, k=1)
    rng = np.random.default_rng(seed)
    first = rng.integers(n, size=SAMPLED_PAIRS)
    offset = rng.integers(1, n, size=SAMPLED_PAIRS)
    return first, (first + offset) % n


def anisotropy(reps, seed: int = 0) -> float:
    """
    Mean cosine similarity over distinct pairs: exact up to 512 vectors, a
    seeded sample of 10,000 pairs beyond that.
    """
    unit = _unit_rows(_as_matrix(reps))
    if unit.shape[0] < 2:
        raise ContractError("anisotropy needs at least two representations")
    first, second = _pair_indices(unit.shape[0], seed)
    return float(np.einsum("ij,ij->i", unit[first], unit[second]).mean())


def cross_class_anisotropy(reps, labels: Sequence[int], seed: int = 0) -> float:
    """Mean cosine similarity over pairs whose labels differ."""
    unit = _unit_rows(_as_matrix(reps))
    labels = np.asarray(labels)
    first, second = _pair_indices(unit.shape[0], seed)
    mask = labels[first] != labels[second]
    if not mask.any():
        raise ContractError("cross-class anisotropy needs at least two labels")
    return float(np.einsum("ij,ij->i", unit[first[mask]], unit[second[mask]]).mean())


def singular_values(reps) -> np.ndarray:
    matrix = _as_matrix(reps)
    centered = matrix - matrix.mean(axis=0, keepdims=True)
    return np.linalg.svd(centered, compute_uv=False)


def effective_rank(reps) -> float:
    """
    ``exp`` of the entropy of the normalised singular values of the centered
    matrix. Values below numerical noise count as zero; an all-zero centered
    matrix returns 1.0 and logs a collapse warning.
    """
    matrix = _as_matrix(reps)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise ContractError("effective rank needs an [n x d] matrix with n >= 2")
    sigma = singular_values(matrix)
    tolerance = (sigma.max() if sigma.size else 0.0) * max(matrix.shape) * np.finfo(np.float64).eps
    sigma = sigma[sigma > max(tolerance, EPSILON)]
    if sigma.size == 0:
        logger.warning("Representations are fully collapsed: centered matrix is zero")
        return 1.0
    p = sigma / sigma.sum()
    return float(np.exp(-(p * np.log(p)).sum()))


@dataclass(frozen=True)
class DiagnosticsSnapshot:
    anisotropy: float
    effective_rank: float
    singular_values: tuple[float, ...]
    cross_class_anisotropy: float | None = None

    @property
    def collapsed(self) -> bool:
        return self.anisotropy > 0.99 or self.effective_rank <= 1.0 + 1e-9


def diagnose(reps, labels: Sequence[int] | None = None, seed: int = 0) -> DiagnosticsSnapshot:
    matrix = _as_matrix(reps)
    cross = None
    if labels is not None and len(set(labels)) > 1:
        cross = cross_class_anisotropy(matrix, labels, seed)
    return DiagnosticsSnapshot(
        anisotropy=anisotropy(matrix, seed),
        effective_rank=effective_rank(matrix),
        singular_values=tuple(float(s) for s in singular_values(matrix)),
        cross_class_anisotropy=cross,
    )


def evaluate_predictions(
    truth: Iterable[int],
    logits: np.ndarray,
    names: Sequence[str],
) -> EvalReport:
    predicted = [predict(row) for row in np.asarray(logits)]
    return EvalReport.from_confusion(ConfusionMatrix.from_predictions(list(truth), predicted, len(names)), names)
