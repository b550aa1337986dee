"""Manifest-driven extraction into embedding stores.

Manifest CSV: header ``id,kind,value`` with kind in {image, text}; the
value is an image path or the caption text itself. Unreadable images
and empty captions do not abort a run: they are collected into a skip
report so a long extraction survives isolated bad rows.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .storewriter import write_store

KINDS = ("image", "text")


@dataclass(frozen=True)
class ManifestRow:
    id: str
    kind: str
    value: str


@dataclass
class SkipReport:
    skipped: list[dict] = field(default_factory=list)

    def add(self, row: ManifestRow, reason: str):
        self.skipped.append({"id": row.id, "kind": row.kind, "reason": reason})

    def write(self, path: str | Path):
        with open(path, "w") as fh:
            json.dump({"skipped": self.skipped}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_manifest(path: str | Path) -> list[ManifestRow]:
    rows = []
    seen: dict[str, set[str]] = {kind: set() for kind in KINDS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "kind", "value"]:
            raise ValueError(f"{path}:1: expected header id,kind,value")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            item_id, kind, value = row
            if kind not in KINDS:
                raise ValueError(f"{path}:{lineno}: unknown kind {kind!r}")
            if item_id in seen[kind]:
                raise ValueError(
                    f"{path}:{lineno}: duplicate {kind} id {item_id!r}"
                )
            seen[kind].add(item_id)
            rows.append(ManifestRow(item_id, kind, value))
    return rows


def _readable_image(row: ManifestRow, report: SkipReport) -> bool:
    path = Path(row.value)
    if not path.exists():
        report.add(row, f"image file not found: {path}")
        return False
    try:
        with Image.open(path) as img:
            img.verify()
    except (UnidentifiedImageError, OSError) as exc:
        report.add(row, f"unreadable image: {exc}")
        return False
    return True


def extract(
    manifest: Sequence[ManifestRow],
    encoder,
    images_out: str | Path,
    texts_out: str | Path,
    batch_size: int = 32,
) -> SkipReport:
    """Encode every usable manifest row and write one store per modality.

    Rows are processed in manifest order; batching is internal and leaves
    no trace in the output beyond floating-point tolerance of the encoder.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    report = SkipReport()
    image_rows = [r for r in manifest if r.kind == "image"]
    text_rows = [r for r in manifest if r.kind == "text"]

    usable_images = [r for r in image_rows if _readable_image(r, report)]
    usable_texts = []
    for row in text_rows:
        if row.value.strip():
            usable_texts.append(row)
        else:
            report.add(row, "empty text")

    image_records: list[tuple[str, np.ndarray]] = []
    for start in range(0, len(usable_images), batch_size):
        batch = usable_images[start : start + batch_size]
        vectors = encoder.encode_images([r.value for r in batch])
        image_records.extend((r.id, v) for r, v in zip(batch, vectors))

    text_records: list[tuple[str, np.ndarray]] = []
    for start in range(0, len(usable_texts), batch_size):
        batch = usable_texts[start : start + batch_size]
        vectors = encoder.encode_texts([r.value for r in batch])
        text_records.extend((r.id, v) for r, v in zip(batch, vectors))

    write_store(image_records, encoder.dim, "image", images_out)
    write_store(text_records, encoder.dim, "text", texts_out)
    return report
