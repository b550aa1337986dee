"""Binary embedding stores.

One store holds the vectors of a single modality (image or text), keyed
by string id. Vectors are written raw, exactly as the upstream encoder
produced them; unit normalization happens at load time in whatever
component needs cosine geometry, so the file stays a faithful archive.

On-disk layout (little endian, no padding):

    bytes 0-3    magic ``EMBS``
    bytes 4-5    format version, u16 (currently 1)
    byte  6      modality code: 0 = image, 1 = text
    byte  7      reserved, must be 0
    bytes 8-11   dim, u32
    bytes 12-19  count, u64
    id table     count entries of (u16 byte length, UTF-8 bytes)
    payload      count * dim float32, row major

Stores are immutable once written; any number of readers may share one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"EMBS"
FORMAT_VERSION = 1
MODALITIES = ("image", "text")
MAX_ID_BYTES = 64

_HEADER = struct.Struct("<4sHBBIQ")


class StoreError(Exception):
    """Base class for embedding-store failures."""


class StoreFormatError(StoreError):
    """The bytes do not follow the store layout (magic, version, fields)."""


class StoreCorruptionError(StoreError):
    """Structurally valid header but truncated or inconsistent payload."""


class NormalizationError(ValueError):
    """Raised when a zero vector is unit-normalized."""


def _check_id(item_id: str) -> bytes:
    raw = item_id.encode("utf-8")
    if not raw:
        raise ValueError("empty id")
    if len(raw) > MAX_ID_BYTES:
        raise ValueError(f"id {item_id!r} is {len(raw)} bytes, limit is {MAX_ID_BYTES}")
    return raw


@dataclass
class EmbeddingStore:
    """In-memory view of one modality's vectors: ids plus a count x dim array."""

    dim: int
    modality: str
    ids: list[str]
    vectors: np.ndarray  # (count, dim) float32
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.dim:
            raise ValueError(
                f"vectors have shape {self.vectors.shape}, expected (*, {self.dim})"
            )
        if len(self.ids) != self.vectors.shape[0]:
            raise ValueError(
                f"{len(self.ids)} ids for {self.vectors.shape[0]} vector rows"
            )
        # Duplicate ids are representable (validate_store reports them);
        # lookups resolve to the first occurrence.
        self._index = {}
        for row, item_id in enumerate(self.ids):
            self._index.setdefault(item_id, row)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def row(self, item_id: str) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise KeyError(f"unknown {self.modality} id {item_id!r}") from None

    def get(self, item_id: str) -> np.ndarray:
        return self.vectors[self.row(item_id)]

    def rows(self, item_ids: Sequence[str]) -> np.ndarray:
        return np.fromiter(
            (self.row(i) for i in item_ids), dtype=np.int64, count=len(item_ids)
        )


@dataclass
class StoreValidationReport:
    """Invariant violations found in a store; empty report = clean store."""

    nan_count: int = 0
    duplicate_ids: list[str] = field(default_factory=list)
    dim_mismatch: bool = False
    zero_vector_ids: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return (
            self.nan_count == 0
            and not self.duplicate_ids
            and not self.dim_mismatch
            and not self.zero_vector_ids
        )

    def to_dict(self) -> dict:
        return {
            "nan_count": self.nan_count,
            "duplicate_ids": list(self.duplicate_ids),
            "dim_mismatch": self.dim_mismatch,
            "zero_vector_ids": list(self.zero_vector_ids),
            "ok": self.ok,
        }


def write_store(
    records: Iterable[tuple[str, Sequence[float] | np.ndarray]],
    dim: int,
    modality: str,
    path: str | Path,
) -> EmbeddingStore:
    """Write ``(id, vector)`` records to ``path`` and return the open store.

    Rejects duplicate ids (naming the id) and vectors whose length is not
    ``dim`` (naming the offending index). The written file round-trips
    bit-exactly through :func:`open_store`.
    """
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    if dim <= 0:
        raise ValueError(f"dim must be positive, got {dim}")

    ids: list[str] = []
    raw_ids: list[bytes] = []
    seen: set[str] = set()
    rows: list[np.ndarray] = []
    for index, (item_id, vector) in enumerate(records):
        if item_id in seen:
            raise ValueError(f"duplicate id {item_id!r}")
        seen.add(item_id)
        arr = np.asarray(vector, dtype=np.float32)
        if arr.ndim != 1 or arr.shape[0] != dim:
            raise ValueError(
                f"record {index} (id {item_id!r}) has dimension "
                f"{arr.shape[0] if arr.ndim == 1 else arr.shape}, expected {dim}"
            )
        ids.append(item_id)
        raw_ids.append(_check_id(item_id))
        rows.append(arr)

    matrix = (
        np.vstack(rows).astype(np.float32)
        if rows
        else np.zeros((0, dim), dtype=np.float32)
    )

    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC,
                FORMAT_VERSION,
                MODALITIES.index(modality),
                0,
                dim,
                len(ids),
            )
        )
        for raw in raw_ids:
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())

    return EmbeddingStore(dim=dim, modality=modality, ids=ids, vectors=matrix)


def open_store(path: str | Path) -> EmbeddingStore:
    """Read a store file, validating the header and payload sizes."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise StoreFormatError(f"{path}: file shorter than the fixed header")
    magic, version, modality_code, reserved, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise StoreFormatError(f"{path}: unsupported format version {version}")
    if modality_code >= len(MODALITIES):
        raise StoreFormatError(f"{path}: unknown modality code {modality_code}")
    if reserved != 0:
        raise StoreFormatError(f"{path}: reserved byte is {reserved}, expected 0")
    if dim == 0:
        raise StoreFormatError(f"{path}: dim is 0")

    offset = _HEADER.size
    ids: list[str] = []
    for _ in range(count):
        if offset + 2 > len(data):
            raise StoreCorruptionError(
                f"{path}: id table truncated at byte {offset} "
                f"(file has {len(data)} bytes)"
            )
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if id_len > MAX_ID_BYTES:
            raise StoreFormatError(
                f"{path}: id of {id_len} bytes exceeds the {MAX_ID_BYTES}-byte limit"
            )
        if offset + id_len > len(data):
            raise StoreCorruptionError(
                f"{path}: id table truncated at byte {offset} "
                f"(file has {len(data)} bytes)"
            )
        ids.append(data[offset : offset + id_len].decode("utf-8"))
        offset += id_len

    expected = offset + count * dim * 4
    if len(data) != expected:
        raise StoreCorruptionError(
            f"{path}: expected {expected} bytes ({count} x {dim} float32 payload), "
            f"found {len(data)}"
        )
    vectors = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset)
    vectors = vectors.reshape(count, dim).copy()
    modality = MODALITIES[modality_code]
    return EmbeddingStore(dim=dim, modality=modality, ids=ids, vectors=vectors)


def unit_normalize(vector: np.ndarray) -> np.ndarray:
    """Scale ``vector`` to unit L2 norm (float64). Zero vectors are an error."""
    arr = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0 or not np.isfinite(norm):
        raise NormalizationError("cannot normalize a zero or non-finite vector")
    return arr / norm


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Row-wise unit normalization in float64. Zero rows are an error."""
    arr = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(~np.isfinite(norms) | (norms == 0.0))
    if bad.size:
        raise NormalizationError(
            f"cannot normalize zero or non-finite rows at indices {bad[:5].tolist()}"
        )
    return arr / norms[:, None]


def validate_store(store: EmbeddingStore) -> StoreValidationReport:
    """Scan a store for invariant violations.

    Violations are report content, not exceptions: zero vectors indicate
    upstream extraction failures and are flagged rather than skipped.
    """
    report = StoreValidationReport()
    report.nan_count = int(np.count_nonzero(~np.isfinite(store.vectors)))
    seen: set[str] = set()
    for item_id in store.ids:
        if item_id in seen and item_id not in report.duplicate_ids:
            report.duplicate_ids.append(item_id)
        seen.add(item_id)
    report.dim_mismatch = (
        store.vectors.ndim != 2
        or store.vectors.shape != (len(store.ids), store.dim)
    )
    with np.errstate(invalid="ignore"):
        norms = np.linalg.norm(store.vectors.astype(np.float64), axis=1)
    for row in np.flatnonzero(norms == 0.0):
        report.zero_vector_ids.append(store.ids[int(row)])
    return report
