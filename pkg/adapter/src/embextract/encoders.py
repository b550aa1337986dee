"""Pluggable image/text encoders.

The default is the pretrained CLIP ViT-L/14 vision-language model (768
dimensions), loaded through sentence-transformers when available. For
offline or fixture work, ``hashed:<dim>`` provides a deterministic
content-hash encoder: not semantically meaningful, but stable across
runs and platforms, which is what format and pipeline tests need.

Encoders expose ``dim`` (read from the model, never hard-coded by
callers) and produce raw, unnormalized vectors; the consuming pipeline
normalizes at load time where cosine geometry is required.
"""

from __future__ import annotations

import hashlib
import unicodedata
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

DEFAULT_ENCODER = "clip-vit-l-14"


class HashedEncoder:
    """Deterministic content-hash features of a chosen dimension.

    Images are decoded, converted to RGB, and downscaled before hashing,
    so the vector follows pixel content rather than file metadata.
    """

    THUMB = (32, 32)

    def __init__(self, dim: int = 768):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.name = f"hashed:{dim}"
        self.dim = dim

    def _vector(self, digest: bytes) -> np.ndarray:
        seed = int.from_bytes(digest[:8], "little")
        return np.random.default_rng(seed).standard_normal(self.dim).astype(np.float32)

    def encode_images(self, paths: Sequence[str | Path]) -> np.ndarray:
        out = np.empty((len(paths), self.dim), dtype=np.float32)
        for i, path in enumerate(paths):
            with Image.open(path) as img:
                pixels = np.asarray(
                    img.convert("RGB").resize(self.THUMB, Image.BILINEAR)
                )
            out[i] = self._vector(hashlib.sha256(b"image:" + pixels.tobytes()).digest())
        return out

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            canonical = unicodedata.normalize("NFC", text).encode("utf-8")
            out[i] = self._vector(hashlib.sha256(b"text:" + canonical).digest())
        return out


class ClipEncoder:
    """Pretrained CLIP through sentence-transformers, in eval mode."""

    MODEL_NAMES = {"clip-vit-l-14": "clip-ViT-L-14"}

    def __init__(self, name: str = DEFAULT_ENCODER):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise RuntimeError(
                f"encoder {name!r} needs the sentence-transformers package "
                "(install the 'clip' extra); for offline use pick 'hashed:768'"
            ) from exc
        self.name = name
        self._model = SentenceTransformer(self.MODEL_NAMES.get(name, name))
        self._model.eval()
        probe = self._model.encode(["probe"], convert_to_numpy=True)
        self.dim = int(probe.shape[1])

    def encode_images(self, paths: Sequence[str | Path]) -> np.ndarray:
        images = [Image.open(p).convert("RGB") for p in paths]
        try:
            return np.asarray(
                self._model.encode(images, convert_to_numpy=True), dtype=np.float32
            )
        finally:
            for img in images:
                img.close()

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        return np.asarray(
            self._model.encode(list(texts), convert_to_numpy=True), dtype=np.float32
        )


def get_encoder(name: str = DEFAULT_ENCODER):
    if name.startswith("hashed:"):
        return HashedEncoder(int(name.split(":", 1)[1]))
    if name == "hashed":
        return HashedEncoder()
    return ClipEncoder(name)
