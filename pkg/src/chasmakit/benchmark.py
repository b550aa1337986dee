"""Modality-balanced evaluation sets.

An evaluation trio holds a truthful image-caption pair, a miscaptioning
false caption for the same image, and optionally an out-of-context image
for the same caption. Expanding trios yields a test set in which every
image appears once as True and once as MC, and every caption with an OOC
partner appears once as True and once as OOC. That double placement caps
any image-only classifier at 50% on True+MC records (and caption-only on
True+OOC), which is the whole point of the construction.

Trio manifest CSV header (ooc_image may be empty):

    group_id,true_image,true_caption_text,true_caption_id,false_caption_text,false_caption_id,ooc_image

Expanded datasets use the shared dataset CSV; balance reports serialize
as JSON with sorted keys.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .chasma import (
    LABEL_MC,
    LABEL_MISINFO,
    LABEL_OOC,
    LABEL_TRUE,
    Dataset,
    PairRecord,
    read_dataset_csv,
)
from .embstore import EmbeddingStore
from .errors import BalanceError, CoverageError

BINARY_MODES = ("true_vs_ooc", "true_vs_mc", "merged")


@dataclass(frozen=True, slots=True)
class TrioRecord:
    group_id: str
    true_image_id: str
    true_caption_id: str
    false_caption_id: str
    ooc_image_id: str | None = None
    true_caption_text: str = ""
    false_caption_text: str = ""


@dataclass
class BalanceReport:
    """Pair-membership counts plus any modality-balance violations."""

    image_counts: dict[str, dict[str, int]] = field(default_factory=dict)
    caption_counts: dict[str, dict[str, int]] = field(default_factory=dict)
    class_counts: dict[str, int] = field(default_factory=dict)
    doubly_placed_captions: int = 0
    singly_placed_captions: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "caption_counts": {k: dict(v) for k, v in sorted(self.caption_counts.items())},
            "class_counts": dict(sorted(self.class_counts.items())),
            "doubly_placed_captions": self.doubly_placed_captions,
            "image_counts": {k: dict(v) for k, v in sorted(self.image_counts.items())},
            "ok": self.ok,
            "singly_placed_captions": self.singly_placed_captions,
            "violations": list(self.violations),
        }


def _check_trio_uniqueness(trios: Sequence[TrioRecord]) -> None:
    for role, getter in (
        ("group_id", lambda t: t.group_id),
        ("true_image", lambda t: t.true_image_id),
        ("true_caption", lambda t: t.true_caption_id),
        ("false_caption", lambda t: t.false_caption_id),
        ("ooc_image", lambda t: t.ooc_image_id),
    ):
        counts = Counter(getter(t) for t in trios if getter(t) is not None)
        for value, n in counts.items():
            if n > 1:
                raise BalanceError(
                    f"{role} {value!r} appears in {n} trios, expected exactly one"
                )


def expand_trios(trios: Sequence[TrioRecord], source: str = "benchmark") -> Dataset:
    """Emit the True, MC, and (when present) OOC records of each trio."""
    trios = list(trios)
    _check_trio_uniqueness(trios)
    records = []
    for trio in trios:
        records.append(
            PairRecord(trio.true_image_id, trio.true_caption_id, LABEL_TRUE, source)
        )
        records.append(
            PairRecord(trio.true_image_id, trio.false_caption_id, LABEL_MC, source)
        )
        if trio.ooc_image_id is not None:
            records.append(
                PairRecord(trio.ooc_image_id, trio.true_caption_id, LABEL_OOC, source)
            )
    return Dataset(tuple(records), "test")


def validate_modality_balance(dataset: Dataset) -> BalanceReport:
    """Check the double-placement structure of a three-class test set.

    Checks: (a) every image seen in a True record appears in exactly one
    MC record and vice versa; (b) a caption seen in a True record appears
    in at most one OOC record, and every OOC caption has exactly one True
    partner (captions without an OOC partner are allowed: not every trio
    has an out-of-context image); (c) no duplicated records. Violations
    are report content, not exceptions.
    """
    report = BalanceReport()
    report.class_counts = dict(dataset.class_counts)

    seen = Counter((r.image_id, r.caption_id, r.label) for r in dataset.records)
    for key, n in sorted(seen.items()):
        if n > 1:
            report.violations.append(
                f"record {key[0]},{key[1]},{key[2]} appears {n} times"
            )

    image_counts: dict[str, Counter] = {}
    caption_counts: dict[str, Counter] = {}
    for rec in dataset.records:
        image_counts.setdefault(rec.image_id, Counter())[rec.label] += 1
        caption_counts.setdefault(rec.caption_id, Counter())[rec.label] += 1
    report.image_counts = {
        k: {label: v[label] for label in (LABEL_TRUE, LABEL_MC, LABEL_OOC) if v[label]}
        for k, v in image_counts.items()
    }
    report.caption_counts = {
        k: {label: v[label] for label in (LABEL_TRUE, LABEL_MC, LABEL_OOC) if v[label]}
        for k, v in caption_counts.items()
    }

    for image_id in sorted(image_counts):
        c = image_counts[image_id]
        if c[LABEL_TRUE] and c[LABEL_TRUE] != c[LABEL_MC]:
            report.violations.append(
                f"image {image_id} has {c[LABEL_TRUE]} True but {c[LABEL_MC]} MC records"
            )
        elif c[LABEL_MC] and not c[LABEL_TRUE]:
            report.violations.append(
                f"image {image_id} has an MC record but no True record"
            )

    for caption_id in sorted(caption_counts):
        c = caption_counts[caption_id]
        if c[LABEL_TRUE]:
            if c[LABEL_OOC] > c[LABEL_TRUE]:
                report.violations.append(
                    f"caption {caption_id} has {c[LABEL_OOC]} OOC records "
                    f"for {c[LABEL_TRUE]} True records"
                )
            elif c[LABEL_OOC] == c[LABEL_TRUE]:
                report.doubly_placed_captions += 1
            else:
                report.singly_placed_captions += 1
        elif c[LABEL_OOC]:
            report.violations.append(
                f"caption {caption_id} has an OOC record but no True record"
            )
    return report


def derive_binary(dataset: Dataset, mode: str) -> Dataset:
    """Binary view of a three-class test set.

    ``true_vs_ooc`` keeps True and OOC records, ``true_vs_mc`` keeps True
    and MC; ``merged`` keeps everything. In all modes the retained
    misinformation records are relabeled to a single class.
    """
    if mode not in BINARY_MODES:
        raise ValueError(f"unknown binary mode {mode!r}, expected one of {BINARY_MODES}")
    wanted = {
        "true_vs_ooc": {LABEL_OOC},
        "true_vs_mc": {LABEL_MC},
        "merged": {LABEL_OOC, LABEL_MC},
    }[mode]
    counts = dataset.class_counts
    for label in wanted:
        if not counts.get(label):
            raise CoverageError(f"mode {mode!r} needs {label} records, none present")
    records = []
    for rec in dataset.records:
        if rec.label == LABEL_TRUE:
            records.append(rec)
        elif rec.label in wanted:
            records.append(
                PairRecord(rec.image_id, rec.caption_id, LABEL_MISINFO, rec.source)
            )
    return Dataset(tuple(records), dataset.split)


def load_benchmark(
    manifest_path: str | Path,
    image_store: EmbeddingStore,
    text_store: EmbeddingStore,
) -> Dataset:
    """Load an expanded benchmark dataset CSV, resolving ids in the stores."""
    dataset = read_dataset_csv(manifest_path, split="test")
    for rec in dataset.records:
        image_store.row(rec.image_id)
        text_store.row(rec.caption_id)
    return dataset


def write_trios_csv(trios: Sequence[TrioRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "group_id",
                "true_image",
                "true_caption_text",
                "true_caption_id",
                "false_caption_text",
                "false_caption_id",
                "ooc_image",
            ]
        )
        for t in trios:
            writer.writerow(
                [
                    t.group_id,
                    t.true_image_id,
                    t.true_caption_text,
                    t.true_caption_id,
                    t.false_caption_text,
                    t.false_caption_id,
                    t.ooc_image_id or "",
                ]
            )


def read_trios_csv(path: str | Path) -> list[TrioRecord]:
    trios = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = [
            "group_id",
            "true_image",
            "true_caption_text",
            "true_caption_id",
            "false_caption_text",
            "false_caption_id",
            "ooc_image",
        ]
        if header != expected:
            raise ValueError(f"{path}:1: expected header {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(row)}")
            trios.append(
                TrioRecord(
                    group_id=row[0],
                    true_image_id=row[1],
                    true_caption_text=row[2],
                    true_caption_id=row[3],
                    false_caption_text=row[4],
                    false_caption_id=row[5],
                    ooc_image_id=row[6] or None,
                )
            )
    return trios
