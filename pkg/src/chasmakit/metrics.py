"""Accuracy reports and the unimodal-bias audit.

The audit compares each multimodal detector variant against each
unimodal variant across training datasets: the mean per-dataset
percentage accuracy change (delta %) and Cohen's d between the two
accuracy columns. Negative delta % and positive d mean the unimodal
model wins, i.e. the evaluation set rewards unimodal bias.

Audit tables interchange as CSV with header
``training_dataset,variant,eval_set,accuracy``; reports serialize to
JSON (sorted keys) and CSV. Both metrics are invariant to whether
accuracies arrive as fractions or percentages.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import DetectorConfig, predict
from .errors import CoverageError
from .features import FeatureSet, label_indices

MULTIMODAL_VARIANTS = ("multimodal_token", "multimodal_dim")
UNIMODAL_VARIANTS = ("text_only", "image_only")
VARIANTS = MULTIMODAL_VARIANTS + UNIMODAL_VARIANTS

_EVAL_BATCH = 4096


class UndefinedEffectError(ValueError):
    """Cohen's d is undefined (fewer than two samples or zero variance)."""


@dataclass
class EvalReport:
    overall_accuracy: float
    per_class_accuracy: dict[str, float]
    confusion: np.ndarray  # (n, n) counts, rows = true class

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": dict(sorted(self.per_class_accuracy.items())),
        }


def evaluate(params, config: DetectorConfig, data: FeatureSet) -> EvalReport:
    """Accuracy, per-class accuracy, and the confusion matrix on ``data``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    y = label_indices(data.labels, config.n)
    preds = np.empty(len(data), dtype=np.int64)
    for start in range(0, len(data), _EVAL_BATCH):
        idx = np.arange(start, min(start + _EVAL_BATCH, len(data)))
        preds[idx] = predict(params, config, data.batch(idx, config))

    n_classes = 2 if config.n == 1 else config.n
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y, preds), 1)

    per_class: dict[str, float] = {}
    labels_arr = np.asarray(data.labels)
    for label in dict.fromkeys(data.labels):
        mask = labels_arr == label
        per_class[label] = float(np.mean(preds[mask] == y[mask]))
    overall = float(np.trace(confusion) / confusion.sum())
    return EvalReport(overall, per_class, confusion)


def delta_pct(multimodal_acc: float, unimodal_acc: float) -> float:
    """Percentage accuracy change of the multimodal model relative to the
    unimodal one; negative values signal unimodal bias."""
    if unimodal_acc <= 0:
        raise ValueError("unimodal accuracy must be positive")
    return 100.0 * (multimodal_acc - unimodal_acc) / unimodal_acc


def cohens_d(unimodal_accs: Sequence[float], multimodal_accs: Sequence[float]) -> float:
    """Pooled-standard-deviation effect size mean(uni) - mean(multi) over
    s_pooled; positive values signal unimodal bias."""
    uni = np.asarray(unimodal_accs, dtype=np.float64)
    multi = np.asarray(multimodal_accs, dtype=np.float64)
    if len(uni) < 2 or len(multi) < 2:
        raise UndefinedEffectError("Cohen's d needs at least two samples per column")
    s1 = uni.var(ddof=1)
    s2 = multi.var(ddof=1)
    pooled = ((len(uni) - 1) * s1 + (len(multi) - 1) * s2) / (len(uni) + len(multi) - 2)
    if pooled == 0.0:
        raise UndefinedEffectError("zero pooled variance")
    return float((uni.mean() - multi.mean()) / math.sqrt(pooled))


@dataclass(frozen=True)
class AccuracyCell:
    training_dataset: str
    variant: str
    eval_set: str
    accuracy: float


@dataclass
class AuditRow:
    eval_set: str
    multimodal_variant: str
    unimodal_variant: str
    mean_delta_pct: float
    cohens_d: float | None
    n_training_datasets: int


@dataclass
class BiasAuditReport:
    rows: list[AuditRow] = field(default_factory=list)
    table: list[AccuracyCell] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rows": [
                {
                    "cohens_d": row.cohens_d,
                    "eval_set": row.eval_set,
                    "mean_delta_pct": row.mean_delta_pct,
                    "multimodal_variant": row.multimodal_variant,
                    "n_training_datasets": row.n_training_datasets,
                    "unimodal_variant": row.unimodal_variant,
                }
                for row in self.rows
            ],
            "table": [
                {
                    "accuracy": cell.accuracy,
                    "eval_set": cell.eval_set,
                    "training_dataset": cell.training_dataset,
                    "variant": cell.variant,
                }
                for cell in self.table
            ],
        }


def audit(table: Sequence[AccuracyCell]) -> BiasAuditReport:
    """Bias audit over an accuracy table.

    For every evaluation set and every (multimodal, unimodal) variant pair
    present, computes the mean per-training-dataset delta % and Cohen's d
    over the two accuracy columns. Every training dataset of an eval set
    must provide each variant that participates; a missing cell raises
    CoverageError naming it. d is None where undefined (one training
    dataset, or constant columns).
    """
    table = list(table)
    eval_sets = list(dict.fromkeys(cell.eval_set for cell in table))
    report = BiasAuditReport(table=table)
    for eval_set in eval_sets:
        cells = [c for c in table if c.eval_set == eval_set]
        datasets = list(dict.fromkeys(c.training_dataset for c in cells))
        present = set(c.variant for c in cells)
        unknown = present.difference(VARIANTS)
        if unknown:
            raise ValueError(f"unknown variant names {sorted(unknown)}")
        values: dict[tuple[str, str], float] = {}
        for c in cells:
            values[(c.training_dataset, c.variant)] = c.accuracy
        for mv in MULTIMODAL_VARIANTS:
            if mv not in present:
                continue
            for uv in UNIMODAL_VARIANTS:
                if uv not in present:
                    continue
                multi_col, uni_col, deltas = [], [], []
                for td in datasets:
                    for variant in (mv, uv):
                        if (td, variant) not in values:
                            raise CoverageError(
                                f"eval set {eval_set!r}: training dataset {td!r} "
                                f"has no {variant!r} accuracy"
                            )
                    multi_col.append(values[(td, mv)])
                    uni_col.append(values[(td, uv)])
                    deltas.append(delta_pct(values[(td, mv)], values[(td, uv)]))
                try:
                    d = cohens_d(uni_col, multi_col)
                except UndefinedEffectError:
                    d = None
                report.rows.append(
                    AuditRow(
                        eval_set=eval_set,
                        multimodal_variant=mv,
                        unimodal_variant=uv,
                        mean_delta_pct=float(np.mean(deltas)),
                        cohens_d=d,
                        n_training_datasets=len(datasets),
                    )
                )
    return report


def read_accuracy_table(path: str | Path) -> list[AccuracyCell]:
    cells = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["training_dataset", "variant", "eval_set", "accuracy"]
        if header != expected:
            raise ValueError(f"{path}:1: expected header {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                acc = float(row[3])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad accuracy {row[3]!r}") from None
            cells.append(AccuracyCell(row[0], row[1], row[2], acc))
    return cells


def write_accuracy_table(cells: Sequence[AccuracyCell], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["training_dataset", "variant", "eval_set", "accuracy"])
        for c in cells:
            writer.writerow([c.training_dataset, c.variant, c.eval_set, repr(c.accuracy)])


def write_audit_csv(report: BiasAuditReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "eval_set",
                "multimodal_variant",
                "unimodal_variant",
                "mean_delta_pct",
                "cohens_d",
                "n_training_datasets",
            ]
        )
        for row in report.rows:
            writer.writerow(
                [
                    row.eval_set,
                    row.multimodal_variant,
                    row.unimodal_variant,
                    repr(row.mean_delta_pct),
                    "" if row.cohens_d is None else repr(row.cohens_d),
                    row.n_training_datasets,
                ]
            )
