"""Named, derived random streams.

Every random decision in the toolkit flows from a single integer seed
through a named stream ("misalign", "split", "init", "shuffle",
"dropout", ...), so each subsystem is reproducible in isolation and
independent of unrelated draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_seed(seed: int, *names: int | str) -> np.random.SeedSequence:
    """Derive a SeedSequence for the stream identified by ``names``.

    String components are folded in via crc32 so the derivation is stable
    across processes and platforms.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, str):
            entropy.append(zlib.crc32(name.encode("utf-8")))
        else:
            entropy.append(int(name) & 0xFFFFFFFF)
    return np.random.SeedSequence(entropy)


def stream_rng(seed: int, *names: int | str) -> np.random.Generator:
    """Generator for the named stream. Same arguments, same stream."""
    return np.random.default_rng(stream_seed(seed, *names))
