"""Crossmodal hard synthetic misalignment.

Given truthful image-caption pairs and a pool of misleading captions,
each pair draws a uniform p and retrieves the pool caption with maximal
cosine similarity to the truthful caption (p <= threshold, text-to-text)
or to the image (p > threshold, image-to-text). Pairing the image with
that caption yields a hard miscaptioned (MC) negative for training.

Also home to the labeled-dataset plumbing around the generator:
building True/MC datasets, removing duplicate uses of a false caption,
class balancing by seeded down-sampling, and dataset aggregation.

Serialization (all CSV files carry a header row):

    pairs        image_id,caption_id
    assignments  image_id,true_caption_id,false_caption_id,branch,p,similarity
    datasets     image_id,caption_id,label,source

Floats are printed as shortest round-trip decimals.
"""

from __future__ import annotations

import csv
import logging
import multiprocessing
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embstore import EmbeddingStore, normalize_rows
from .errors import CoverageError
from .rng import stream_rng

logger = logging.getLogger(__name__)

LABEL_TRUE = "True"
LABEL_OOC = "OOC"
LABEL_MC = "MC"
LABEL_MISINFO = "Misinfo"
# Canonical class order: multiclass indices and deterministic iteration.
LABELS = (LABEL_TRUE, LABEL_OOC, LABEL_MC, LABEL_MISINFO)

BRANCH_TEXT = "text_text"
BRANCH_IMAGE = "image_text"

# Fixed scan grid. Workers are handed whole chunks, so every similarity
# block is computed with identical shapes regardless of worker count.
PAIR_CHUNK = 256
POOL_CHUNK = 8192


@dataclass(frozen=True, slots=True)
class TruthfulPair:
    image_id: str
    caption_id: str


@dataclass(frozen=True, slots=True)
class MisalignmentAssignment:
    image_id: str
    true_caption_id: str
    false_caption_id: str
    branch: str
    p: float
    similarity: float


@dataclass(frozen=True, slots=True)
class PairRecord:
    image_id: str
    caption_id: str
    label: str
    source: str
    # Retrieval similarity carried from the assignment that produced an MC
    # record; None for True records and for datasets re-read from CSV.
    similarity: float | None = None


class CaptionPool:
    """Misleading-caption candidates: unique ids plus unit-norm embeddings."""

    def __init__(self, caption_ids: Sequence[str], embeddings: np.ndarray):
        if len(caption_ids) == 0:
            raise ValueError("caption pool is empty")
        if len(set(caption_ids)) != len(caption_ids):
            raise ValueError("caption pool ids are not unique")
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(caption_ids):
            raise ValueError(
                f"pool embeddings shape {emb.shape} does not match "
                f"{len(caption_ids)} ids"
            )
        norms = np.linalg.norm(emb, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("pool embeddings must be unit normalized")
        self.caption_ids = list(caption_ids)
        self.embeddings = emb

    def __len__(self) -> int:
        return len(self.caption_ids)

    @classmethod
    def from_store(cls, store: EmbeddingStore) -> "CaptionPool":
        return cls(store.ids, normalize_rows(store.vectors))


@dataclass
class Dataset:
    """Labeled image-caption records under one split tag."""

    records: tuple[PairRecord, ...]
    split: str

    SPLITS = ("train", "validation", "test")

    def __post_init__(self):
        if self.split not in self.SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        self.records = tuple(self.records)

    @property
    def class_counts(self) -> dict[str, int]:
        counts = Counter(rec.label for rec in self.records)
        return {label: counts[label] for label in LABELS if counts[label]}

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# Eq.-style misalignment retrieval
# ---------------------------------------------------------------------------

# Read-only state shared with forked workers.
_SCAN_STATE: dict = {}


def _resolve_queries(
    pairs: Sequence[TruthfulPair],
    image_store: EmbeddingStore,
    text_store: EmbeddingStore,
    text_branch: np.ndarray,
) -> np.ndarray:
    """Branch-appropriate raw query vectors, unit-normalized, one per pair."""
    raw = np.empty((len(pairs), image_store.dim), dtype=np.float32)
    for i, pair in enumerate(pairs):
        if text_branch[i]:
            raw[i] = text_store.get(pair.caption_id)
            image_store.row(pair.image_id)  # fail fast on a bad image id too
        else:
            raw[i] = image_store.get(pair.image_id)
            text_store.row(pair.caption_id)
    return normalize_rows(raw)


def _scan_pair_chunk(bounds: tuple[int, int]) -> list[tuple[int, float]]:
    """Exact scan of one pair chunk against the whole pool.

    Returns (pool_row, similarity) per pair, where the similarity is
    recomputed as a plain vector dot so it is picked independently of the
    blocked matmul used for the argmax search. Ties take the smallest
    candidate id.
    """
    start, stop = bounds
    queries: np.ndarray = _SCAN_STATE["queries"]
    pool_emb: np.ndarray = _SCAN_STATE["pool_emb"]
    pool_ids: list[str] = _SCAN_STATE["pool_ids"]

    q = queries[start:stop]
    n = q.shape[0]
    best_sim = np.full(n, -np.inf)
    best_row = np.full(n, -1, dtype=np.int64)

    for c0 in range(0, pool_emb.shape[0], POOL_CHUNK):
        block = pool_emb[c0 : c0 + POOL_CHUNK]
        sims = q @ block.T
        row_max = sims.max(axis=1)
        arg = sims.argmax(axis=1)
        n_max = np.count_nonzero(sims == row_max[:, None], axis=1)
        for i in range(n):
            m = row_max[i]
            j = int(arg[i])
            # Resolve intra-block ties by smallest candidate id.
            if n_max[i] > 1:
                ties = np.flatnonzero(sims[i] == m)
                j = min(ties, key=lambda t: pool_ids[c0 + t])
            cand = c0 + j
            if m > best_sim[i] or (
                m == best_sim[i] and pool_ids[cand] < pool_ids[best_row[i]]
            ):
                best_sim[i] = m
                best_row[i] = cand

    return [
        (int(best_row[i]), float(np.dot(q[i], pool_emb[best_row[i]])))
        for i in range(n)
    ]


def misalign(
    pairs: Sequence[TruthfulPair],
    image_store: EmbeddingStore,
    text_store: EmbeddingStore,
    pool: CaptionPool,
    seed: int,
    threshold: float = 0.5,
    workers: int = 1,
) -> list[MisalignmentAssignment]:
    """Retrieve the most similar misleading caption for each truthful pair.

    One uniform p is drawn per pair, in input order, from the named
    "misalign" stream. Output order matches input order and is a pure
    function of (inputs, seed): the scan grid is fixed, so any worker
    count produces identical assignments.
    """
    if len(pool) == 0:
        raise ValueError("caption pool is empty")
    if image_store.dim != text_store.dim:
        raise ValueError(
            f"stores disagree on dim: image {image_store.dim} vs text {text_store.dim}"
        )
    if pool.embeddings.shape[1] != text_store.dim:
        raise ValueError(
            f"pool dim {pool.embeddings.shape[1]} does not match stores ({text_store.dim})"
        )
    pairs = list(pairs)
    if not pairs:
        return []

    p_draws = stream_rng(seed, "misalign").random(len(pairs))
    text_branch = p_draws <= threshold
    queries = _resolve_queries(pairs, image_store, text_store, text_branch)

    _SCAN_STATE["queries"] = queries
    _SCAN_STATE["pool_emb"] = pool.embeddings
    _SCAN_STATE["pool_ids"] = pool.caption_ids
    chunk_bounds = [
        (start, min(start + PAIR_CHUNK, len(pairs)))
        for start in range(0, len(pairs), PAIR_CHUNK)
    ]
    try:
        if workers > 1 and len(chunk_bounds) > 1:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(processes=workers) as pool_proc:
                per_chunk = pool_proc.map(_scan_pair_chunk, chunk_bounds)
        else:
            per_chunk = [_scan_pair_chunk(b) for b in chunk_bounds]
    finally:
        _SCAN_STATE.clear()

    choices = [item for chunk in per_chunk for item in chunk]
    assignments = []
    exact_text_matches = 0
    for i, pair in enumerate(pairs):
        row, sim = choices[i]
        branch = BRANCH_TEXT if text_branch[i] else BRANCH_IMAGE
        if branch == BRANCH_TEXT and sim >= 1.0 - 1e-9:
            exact_text_matches += 1
        assignments.append(
            MisalignmentAssignment(
                image_id=pair.image_id,
                true_caption_id=pair.caption_id,
                false_caption_id=pool.caption_ids[row],
                branch=branch,
                p=float(p_draws[i]),
                similarity=sim,
            )
        )
    if exact_text_matches:
        logger.warning(
            "%d text-branch assignments matched a pool caption exactly "
            "(similarity ~1); the query caption likely also appears in the pool",
            exact_text_matches,
        )
    return assignments


def misalign_bruteforce(
    pairs: Sequence[TruthfulPair],
    image_store: EmbeddingStore,
    text_store: EmbeddingStore,
    pool: CaptionPool,
    seed: int,
    threshold: float = 0.5,
) -> list[MisalignmentAssignment]:
    """Reference scan: a plain doubly nested loop, no chunking.

    Definitional semantics for :func:`misalign`; kept deliberately simple.
    """
    if len(pool) == 0:
        raise ValueError("caption pool is empty")
    if image_store.dim != text_store.dim:
        raise ValueError(
            f"stores disagree on dim: image {image_store.dim} vs text {text_store.dim}"
        )
    pairs = list(pairs)
    if not pairs:
        return []

    p_draws = stream_rng(seed, "misalign").random(len(pairs))
    text_branch = p_draws <= threshold
    queries = _resolve_queries(pairs, image_store, text_store, text_branch)

    assignments = []
    for i, pair in enumerate(pairs):
        q = queries[i]
        best_sim = -np.inf
        best_id = None
        best_row = -1
        for j, caption_id in enumerate(pool.caption_ids):
            sim = float(np.dot(q, pool.embeddings[j]))
            if sim > best_sim or (sim == best_sim and caption_id < best_id):
                best_sim = sim
                best_id = caption_id
                best_row = j
        assignments.append(
            MisalignmentAssignment(
                image_id=pair.image_id,
                true_caption_id=pair.caption_id,
                false_caption_id=pool.caption_ids[best_row],
                branch=BRANCH_TEXT if text_branch[i] else BRANCH_IMAGE,
                p=float(p_draws[i]),
                similarity=best_sim,
            )
        )
    return assignments


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------


def build_mc_dataset(
    pairs: Sequence[TruthfulPair],
    assignments: Sequence[MisalignmentAssignment],
    split: str = "train",
    true_source: str = "truthful",
) -> Dataset:
    """Pair every truthful record with its miscaptioned counterpart.

    The result holds one True record per input pair followed by one MC
    record reusing the same image with the assigned false caption, so the
    two classes are balanced by construction.
    """
    pairs = list(pairs)
    assignments = list(assignments)
    if len(pairs) != len(assignments):
        raise ValueError(
            f"{len(pairs)} pairs but {len(assignments)} assignments"
        )
    for pair, assignment in zip(pairs, assignments):
        if (
            pair.image_id != assignment.image_id
            or pair.caption_id != assignment.true_caption_id
        ):
            raise ValueError(
                f"assignment for image {assignment.image_id!r} does not match "
                f"pair (image {pair.image_id!r}, caption {pair.caption_id!r})"
            )
    records = [
        PairRecord(p.image_id, p.caption_id, LABEL_TRUE, true_source)
        for p in pairs
    ]
    records += [
        PairRecord(a.image_id, a.false_caption_id, LABEL_MC, "chasma", a.similarity)
        for a in assignments
    ]
    return Dataset(tuple(records), split)


def deduplicate_false_captions(dataset: Dataset) -> Dataset:
    """Keep one MC record per false caption.

    Among MC records sharing a caption the highest-similarity one
    survives (it is the hardest sample); ties go to the smallest
    image_id. True and OOC records pass through untouched.
    """
    best: dict[str, int] = {}
    for idx, rec in enumerate(dataset.records):
        if rec.label != LABEL_MC:
            continue
        current = best.get(rec.caption_id)
        if current is None:
            best[rec.caption_id] = idx
            continue
        held = dataset.records[current]
        rec_sim = -np.inf if rec.similarity is None else rec.similarity
        held_sim = -np.inf if held.similarity is None else held.similarity
        if rec_sim > held_sim or (rec_sim == held_sim and rec.image_id < held.image_id):
            best[rec.caption_id] = idx
    keep = set(best.values())
    records = tuple(
        rec
        for idx, rec in enumerate(dataset.records)
        if rec.label != LABEL_MC or idx in keep
    )
    return Dataset(records, dataset.split)


def downsample_balance(dataset: Dataset, seed: int) -> Dataset:
    """Reduce every present class to the minimum class count.

    Sampling is uniform without replacement from the named "balance"
    stream; surviving records keep their original order.
    """
    counts = dataset.class_counts
    if not counts:
        return dataset
    target = min(counts.values())
    rng = stream_rng(seed, "balance")
    keep: set[int] = set()
    by_label: dict[str, list[int]] = {}
    for idx, rec in enumerate(dataset.records):
        by_label.setdefault(rec.label, []).append(idx)
    for label in LABELS:
        positions = by_label.get(label)
        if positions is None:
            continue
        if len(positions) == target:
            keep.update(positions)
        else:
            chosen = rng.choice(len(positions), size=target, replace=False)
            keep.update(positions[i] for i in chosen)
    records = tuple(rec for idx, rec in enumerate(dataset.records) if idx in keep)
    return Dataset(records, dataset.split)


def aggregate(
    datasets: Sequence[Dataset],
    seed: int,
    multiclass: bool = False,
) -> Dataset:
    """Concatenate datasets (provenance preserved) and rebalance.

    With ``multiclass=True`` the combination must cover both misinformation
    classes: at least one source contributing OOC and at least one
    contributing MC records.
    """
    datasets = list(datasets)
    if not datasets:
        raise ValueError("nothing to aggregate")
    split = datasets[0].split
    for ds in datasets[1:]:
        if ds.split != split:
            raise ValueError(
                f"cannot aggregate split {ds.split!r} with split {split!r}"
            )
    if multiclass:
        has_ooc = any(LABEL_OOC in ds.class_counts for ds in datasets)
        has_mc = any(LABEL_MC in ds.class_counts for ds in datasets)
        if not has_ooc or not has_mc:
            missing = LABEL_OOC if not has_ooc else LABEL_MC
            raise CoverageError(
                f"multiclass aggregation needs a source contributing {missing} records"
            )
    combined = tuple(rec for ds in datasets for rec in ds.records)
    return downsample_balance(Dataset(combined, split), seed)


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------


def write_pairs_csv(pairs: Iterable[TruthfulPair], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "caption_id"])
        for pair in pairs:
            writer.writerow([pair.image_id, pair.caption_id])


def read_pairs_csv(path: str | Path) -> list[TruthfulPair]:
    pairs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_id", "caption_id"]:
            raise ValueError(f"{path}:1: expected header image_id,caption_id")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            pairs.append(TruthfulPair(*row))
    return pairs


def write_assignments_csv(
    assignments: Iterable[MisalignmentAssignment], path: str | Path
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "image_id",
                "true_caption_id",
                "false_caption_id",
                "branch",
                "p",
                "similarity",
            ]
        )
        for a in assignments:
            writer.writerow(
                [
                    a.image_id,
                    a.true_caption_id,
                    a.false_caption_id,
                    a.branch,
                    repr(a.p),
                    repr(a.similarity),
                ]
            )


def read_assignments_csv(path: str | Path) -> list[MisalignmentAssignment]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            image_id, true_cap, false_cap, branch, p, sim = row
            if branch not in (BRANCH_TEXT, BRANCH_IMAGE):
                raise ValueError(f"{path}:{lineno}: unknown branch {branch!r}")
            out.append(
                MisalignmentAssignment(
                    image_id, true_cap, false_cap, branch, float(p), float(sim)
                )
            )
    return out


def write_dataset_csv(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "caption_id", "label", "source"])
        for rec in dataset.records:
            writer.writerow([rec.image_id, rec.caption_id, rec.label, rec.source])


def read_dataset_csv(path: str | Path, split: str) -> Dataset:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_id", "caption_id", "label", "source"]:
            raise ValueError(
                f"{path}:1: expected header image_id,caption_id,label,source"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            image_id, caption_id, label, source = row
            if label not in LABELS:
                raise ValueError(f"{path}:{lineno}: unknown label {label!r}")
            records.append(PairRecord(image_id, caption_id, label, source))
    return Dataset(tuple(records), split)
