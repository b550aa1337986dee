"""Materializing labeled datasets into detector-ready arrays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .chasma import LABEL_MC, LABEL_OOC, LABEL_TRUE, Dataset
from .detector import Batch, DetectorConfig
from .embstore import EmbeddingStore

MULTICLASS_INDEX = {LABEL_TRUE: 0, LABEL_OOC: 1, LABEL_MC: 2}
MULTICLASS_ORDER = (LABEL_TRUE, LABEL_OOC, LABEL_MC)


def label_indices(labels: list[str], n: int) -> np.ndarray:
    """Class indices for the loss: n=3 uses the canonical three-class
    order, n=1 maps True to 0 and every misinformation label to 1."""
    if n == 1:
        return np.fromiter(
            (0 if lab == LABEL_TRUE else 1 for lab in labels),
            dtype=np.int64,
            count=len(labels),
        )
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        if lab not in MULTICLASS_INDEX:
            raise ValueError(f"label {lab!r} has no multiclass index")
        out[i] = MULTICLASS_INDEX[lab]
    return out


@dataclass
class FeatureSet:
    """A dataset's embeddings and labels, gathered once from the stores."""

    images: np.ndarray  # (N, m) float64
    texts: np.ndarray  # (N, m) float64
    labels: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, indices: np.ndarray, config: DetectorConfig) -> Batch:
        y = label_indices([self.labels[i] for i in indices], config.n)
        img = self.images[indices] if config.mode != "text_only" else None
        txt = self.texts[indices] if config.mode != "image_only" else None
        return Batch(image_vectors=img, text_vectors=txt, labels=y)


def _gather(stores: Sequence[EmbeddingStore], ids: list[str]) -> np.ndarray:
    out = np.empty((len(ids), stores[0].dim), dtype=np.float64)
    for i, item_id in enumerate(ids):
        for store in stores:
            if item_id in store:
                out[i] = store.get(item_id)
                break
        else:
            raise KeyError(f"unknown {stores[0].modality} id {item_id!r}")
    return out


def materialize(
    dataset: Dataset,
    image_stores: EmbeddingStore | Sequence[EmbeddingStore],
    text_stores: EmbeddingStore | Sequence[EmbeddingStore],
) -> FeatureSet:
    """Gather raw embedding rows for every record (vectors stay unnormalized,
    exactly as the encoder produced them).

    Each side accepts one store or several, resolved in order; MC datasets
    typically need the truthful caption store plus the misleading pool store.
    """
    if isinstance(image_stores, EmbeddingStore):
        image_stores = [image_stores]
    if isinstance(text_stores, EmbeddingStore):
        text_stores = [text_stores]
    return FeatureSet(
        images=_gather(list(image_stores), [rec.image_id for rec in dataset.records]),
        texts=_gather(list(text_stores), [rec.caption_id for rec in dataset.records]),
        labels=[rec.label for rec in dataset.records],
    )
