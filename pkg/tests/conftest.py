import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from chasmakit import chasma, synthkit
from chasmakit.embstore import EmbeddingStore


def make_stores(dim, n_pairs, n_pool, seed=0):
    """Plain random unit-vector stores plus matching truthful pairs."""
    rng = np.random.default_rng(seed)

    def unit(n):
        v = rng.standard_normal((n, dim))
        return (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(np.float32)

    image_store = EmbeddingStore(
        dim, "image", [f"img{i:06d}" for i in range(n_pairs)], unit(n_pairs)
    )
    text_store = EmbeddingStore(
        dim, "text", [f"cap{i:06d}" for i in range(n_pairs)], unit(n_pairs)
    )
    pool_store = EmbeddingStore(
        dim, "text", [f"pool{j:06d}" for j in range(n_pool)], unit(n_pool)
    )
    pairs = [
        chasma.TruthfulPair(f"img{i:06d}", f"cap{i:06d}") for i in range(n_pairs)
    ]
    return image_store, text_store, pool_store, pairs


@pytest.fixture(scope="session")
def small_corpus():
    return synthkit.generate_corpus(
        synthkit.SynthConfig(dim=16, n_pairs=120, signal_mode="crossmodal_only", seed=3)
    )
