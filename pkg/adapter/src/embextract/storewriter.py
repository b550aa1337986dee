"""Writer for the binary embedding-store format.

Implemented from the published byte layout rather than by importing the
consumer package: format conformance is the contract between this
adapter and the pipeline that ingests its output, and the consumer's
validator checks it in the tests.

Layout (little endian, no padding): magic ``EMBS``; u16 version (1);
u8 modality (0 image, 1 text); u8 reserved (0); u32 dim; u64 count;
count x (u16 id byte length, UTF-8 id); count * dim float32 row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"EMBS"
VERSION = 1
MODALITY_CODES = {"image": 0, "text": 1}
MAX_ID_BYTES = 64


def write_store(
    records: Iterable[tuple[str, Sequence[float] | np.ndarray]],
    dim: int,
    modality: str,
    path: str | Path,
) -> int:
    """Write records to ``path``; returns the number of rows written."""
    if modality not in MODALITY_CODES:
        raise ValueError(f"unknown modality {modality!r}")
    if dim <= 0:
        raise ValueError("dim must be positive")
    ids: list[bytes] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    for item_id, vector in records:
        if item_id in seen:
            raise ValueError(f"duplicate id {item_id!r}")
        seen.add(item_id)
        raw = item_id.encode("utf-8")
        if not raw or len(raw) > MAX_ID_BYTES:
            raise ValueError(f"id {item_id!r} must be 1..{MAX_ID_BYTES} UTF-8 bytes")
        arr = np.asarray(vector, dtype="<f4")
        if arr.shape != (dim,):
            raise ValueError(f"id {item_id!r}: vector shape {arr.shape} != ({dim},)")
        ids.append(raw)
        rows.append(arr)

    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                "<4sHBBIQ", MAGIC, VERSION, MODALITY_CODES[modality], 0, dim, len(ids)
            )
        )
        for raw in ids:
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        if rows:
            fh.write(np.ascontiguousarray(np.vstack(rows), dtype="<f4").tobytes())
    return len(ids)
