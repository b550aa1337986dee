"""Seeded synthetic corpora with controllable signal placement.

Each embedding is a unit vector assembled from three blocks: a latent
block carrying crossmodal alignment, an optional one-dimensional style
block carrying a unimodal class marker, and a filler noise block that
gives retrieval its variety. Where the class signal lives depends on
the mode:

* ``crossmodal_only``: truthful captions share their latent direction
  with their image; pool captions draw fresh latents. Only the joint
  image/text relation separates True from MC; either modality alone is
  at chance.
* ``text_bias``: truthful captions carry style +c, pool captions -c;
  text alone solves the task (images are noise).
* ``image_bias``: clean images carry style +c; each has a "manipulated"
  twin at -c used for miscaptioned records, so the image alone solves
  the task (captions are noise).
* ``noise``: nothing is planted; every model sits at chance.

``signal_strength`` interpolates toward noise: it mixes the shared
latent (crossmodal) or flips a fraction of style signs (bias modes).
Everything derives from the config seed, so equal configs produce
bit-identical stores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chasma import (
    LABEL_MC,
    LABEL_TRUE,
    CaptionPool,
    Dataset,
    PairRecord,
    TruthfulPair,
    build_mc_dataset,
    deduplicate_false_captions,
    downsample_balance,
    misalign,
)
from .benchmark import TrioRecord
from .embstore import EmbeddingStore
from .rng import stream_rng

SIGNAL_MODES = ("crossmodal_only", "text_bias", "image_bias", "noise")

# Amplitude split calibrated so a small trained detector separates the
# planted crossmodal signal by a wide margin while retrieval stays
# noise-dominated (selection does not erase the latent gap).
LATENT_AMPLITUDE = 0.6
STYLE_AMPLITUDE = 0.45


@dataclass(frozen=True)
class SynthConfig:
    dim: int
    n_pairs: int
    signal_mode: str = "crossmodal_only"
    signal_strength: float = 1.0
    seed: int = 0
    pool_size: int | None = None

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.n_pairs < 1:
            raise ValueError(f"n_pairs must be >= 1, got {self.n_pairs}")
        if self.signal_mode not in SIGNAL_MODES:
            raise ValueError(f"unknown signal mode {self.signal_mode!r}")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal_strength must be in [0, 1]")

    @property
    def n_pool(self) -> int:
        return self.pool_size if self.pool_size is not None else self.n_pairs


@dataclass
class SynthCorpus:
    config: SynthConfig
    image_store: EmbeddingStore
    text_store: EmbeddingStore
    pairs: list[TruthfulPair]
    pool_store: EmbeddingStore

    def pool(self) -> CaptionPool:
        return CaptionPool.from_store(self.pool_store)


@dataclass
class SynthBenchmark:
    config: SynthConfig
    trios: list[TrioRecord]
    image_store: EmbeddingStore
    text_store: EmbeddingStore


def _blocks(dim: int) -> tuple[slice, int | None, slice]:
    """(latent slice, style index or None, noise slice) for a dimension.

    The latent block is kept small so its per-coordinate amplitude,
    a/sqrt(k), stands clear of the noise floor, but not so small that a
    large pool contains many candidates almost perfectly aligned with a
    given query latent (which would let retrieval erase the planted gap
    between aligned and misaligned pairs).
    """
    latent = max(1, min(6, dim // 5))
    style = latent if dim - latent >= 2 else None
    noise_start = latent + (1 if style is not None else 0)
    return slice(0, latent), style, slice(noise_start, dim)


def _unit(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Rows drawn uniformly on the unit sphere of the last axis."""
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _assemble(dim, latent_sl, style_ix, noise_sl, latents, styles, noises,
              latent_amp, style_amp):
    n = noises.shape[0]
    out = np.zeros((n, dim))
    noise_amp = np.sqrt(max(0.0, 1.0 - latent_amp**2 - style_amp**2))
    if latents is not None and latent_amp > 0:
        out[:, latent_sl] = latent_amp * latents
    if style_ix is not None and style_amp > 0:
        out[:, style_ix] = style_amp * styles
    out[:, noise_sl] = noise_amp * noises
    # Unsignalled blocks fold their weight into the noise budget so every
    # vector stays unit norm regardless of mode.
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return (out / norms).astype(np.float32)


def _style_signs(rng, n, strength):
    """Mostly +1 signs; a (1 - strength)/2 fraction flips to -1."""
    flips = rng.random(n) < (1.0 - strength) / 2.0
    return np.where(flips, -1.0, 1.0)


def generate_corpus(config: SynthConfig) -> SynthCorpus:
    """Truthful image-caption pairs plus a misleading caption pool."""
    dim, n, n_pool = config.dim, config.n_pairs, config.n_pool
    s = config.signal_strength
    mode = config.signal_mode
    latent_sl, style_ix, noise_sl = _blocks(dim)
    k = latent_sl.stop

    rng = stream_rng(config.seed, "synth", "corpus")
    img_latents = _unit(rng, (n, k))
    img_noise = _unit(rng, (n, noise_sl.stop - noise_sl.start))
    txt_noise = _unit(rng, (n, noise_sl.stop - noise_sl.start))
    pool_noise = _unit(rng, (n_pool, noise_sl.stop - noise_sl.start))

    if mode == "crossmodal_only":
        fresh = _unit(rng, (n, k))
        txt_latents = s * img_latents + np.sqrt(max(0.0, 1.0 - s * s)) * fresh
        txt_latents /= np.linalg.norm(txt_latents, axis=1, keepdims=True)
    else:
        txt_latents = _unit(rng, (n, k))
    pool_latents = _unit(rng, (n_pool, k))

    img_styles = txt_styles = np.zeros(n)
    pool_styles = np.zeros(n_pool)
    img_style_amp = txt_style_amp = 0.0
    if mode == "text_bias":
        txt_style_amp = STYLE_AMPLITUDE
        txt_styles = _style_signs(rng, n, s)
        pool_styles = -_style_signs(rng, n_pool, s)
    elif mode == "image_bias":
        img_style_amp = STYLE_AMPLITUDE
        img_styles = _style_signs(rng, n, s)

    lat_amp = LATENT_AMPLITUDE
    image_vecs = _assemble(
        dim, latent_sl, style_ix, noise_sl, img_latents, img_styles, img_noise,
        lat_amp, img_style_amp,
    )
    text_vecs = _assemble(
        dim, latent_sl, style_ix, noise_sl, txt_latents, txt_styles, txt_noise,
        lat_amp, txt_style_amp,
    )
    pool_vecs = _assemble(
        dim, latent_sl, style_ix, noise_sl, pool_latents, pool_styles, pool_noise,
        lat_amp, txt_style_amp,
    )

    image_ids = [f"img{i:07d}" for i in range(n)]
    text_ids = [f"cap{i:07d}" for i in range(n)]
    pool_ids = [f"pool{j:07d}" for j in range(n_pool)]

    if mode == "image_bias":
        # Manipulated twins: same latent and noise, opposite style marker.
        twin_vecs = _assemble(
            dim, latent_sl, style_ix, noise_sl, img_latents, -img_styles, img_noise,
            lat_amp, img_style_amp,
        )
        image_vecs = np.vstack([image_vecs, twin_vecs])
        image_ids = image_ids + [f"imgm{i:07d}" for i in range(n)]

    image_store = EmbeddingStore(dim, "image", image_ids, image_vecs)
    text_store = EmbeddingStore(dim, "text", text_ids, text_vecs)
    pool_store = EmbeddingStore(dim, "text", pool_ids, pool_vecs)
    pairs = [TruthfulPair(f"img{i:07d}", f"cap{i:07d}") for i in range(n)]
    return SynthCorpus(config, image_store, text_store, pairs, pool_store)


def build_training_dataset(
    corpus: SynthCorpus,
    deduplicate: bool = True,
    balance: bool = True,
) -> Dataset:
    """Labeled True/MC dataset realizing the corpus's planted signal.

    crossmodal_only and text_bias run the misalignment pipeline.
    image_bias pairs each manipulated twin image with a pool caption,
    mirroring corpora whose fake records revolve around edited images.
    noise pairs images with uniformly random pool captions: retrieval by
    argmax similarity would itself correlate MC pairs across modalities,
    so a no-signal fixture must not use it.
    """
    config = corpus.config
    if config.signal_mode in ("noise", "image_bias"):
        # MC records pair a seeded random pool caption with either the
        # truthful image (noise) or its manipulated twin (image_bias).
        rng = stream_rng(config.seed, "synth", "mc-captions")
        order = rng.permutation(config.n_pool)
        twins = config.signal_mode == "image_bias"
        records = [
            PairRecord(p.image_id, p.caption_id, LABEL_TRUE, "truthful")
            for p in corpus.pairs
        ]
        records += [
            PairRecord(
                f"imgm{i:07d}" if twins else corpus.pairs[i].image_id,
                corpus.pool_store.ids[order[i % config.n_pool]],
                LABEL_MC,
                "synthetic",
            )
            for i in range(config.n_pairs)
        ]
        dataset = Dataset(tuple(records), "train")
    else:
        assignments = misalign(
            corpus.pairs,
            corpus.image_store,
            corpus.text_store,
            corpus.pool(),
            seed=config.seed,
        )
        dataset = build_mc_dataset(corpus.pairs, assignments)
    if deduplicate:
        dataset = deduplicate_false_captions(dataset)
    if balance:
        dataset = downsample_balance(dataset, config.seed)
    return dataset


def generate_balanced_benchmark(
    config: SynthConfig, missing_ooc_fraction: float = 0.0
) -> SynthBenchmark:
    """Trios satisfying the modality-balance invariants.

    Each trio holds an aligned truthful pair, a fresh false caption for
    the same image, and (unless dropped by ``missing_ooc_fraction``) a
    fresh out-of-context image for the same caption.
    """
    if not 0.0 <= missing_ooc_fraction <= 1.0:
        raise ValueError("missing_ooc_fraction must be in [0, 1]")
    dim, n = config.dim, config.n_pairs
    s = config.signal_strength
    latent_sl, style_ix, noise_sl = _blocks(dim)
    k = latent_sl.stop

    rng = stream_rng(config.seed, "synth", "benchmark")
    img_latents = _unit(rng, (n, k))
    fresh = _unit(rng, (n, k))
    cap_latents = s * img_latents + np.sqrt(max(0.0, 1.0 - s * s)) * fresh
    cap_latents /= np.linalg.norm(cap_latents, axis=1, keepdims=True)
    false_latents = _unit(rng, (n, k))
    ooc_latents = _unit(rng, (n, k))
    noise = [_unit(rng, (n, noise_sl.stop - noise_sl.start)) for _ in range(4)]
    zeros = np.zeros(n)

    amp = LATENT_AMPLITUDE
    true_imgs = _assemble(dim, latent_sl, style_ix, noise_sl, img_latents, zeros, noise[0], amp, 0.0)
    true_caps = _assemble(dim, latent_sl, style_ix, noise_sl, cap_latents, zeros, noise[1], amp, 0.0)
    false_caps = _assemble(dim, latent_sl, style_ix, noise_sl, false_latents, zeros, noise[2], amp, 0.0)
    ooc_imgs = _assemble(dim, latent_sl, style_ix, noise_sl, ooc_latents, zeros, noise[3], amp, 0.0)

    n_missing = int(round(n * missing_ooc_fraction))
    missing = set(rng.choice(n, size=n_missing, replace=False).tolist())

    trios = []
    image_records = []
    text_records = []
    for i in range(n):
        gid = f"g{i:06d}"
        has_ooc = i not in missing
        trios.append(
            TrioRecord(
                group_id=gid,
                true_image_id=f"{gid}.img",
                true_caption_id=f"{gid}.cap",
                false_caption_id=f"{gid}.fcap",
                ooc_image_id=f"{gid}.ooc" if has_ooc else None,
                true_caption_text=f"synthetic truthful caption {i}",
                false_caption_text=f"synthetic misleading caption {i}",
            )
        )
        image_records.append((f"{gid}.img", true_imgs[i]))
        if has_ooc:
            image_records.append((f"{gid}.ooc", ooc_imgs[i]))
        text_records.append((f"{gid}.cap", true_caps[i]))
        text_records.append((f"{gid}.fcap", false_caps[i]))

    image_store = EmbeddingStore(
        dim, "image",
        [rid for rid, _ in image_records],
        np.vstack([vec for _, vec in image_records]),
    )
    text_store = EmbeddingStore(
        dim, "text",
        [rid for rid, _ in text_records],
        np.vstack([vec for _, vec in text_records]),
    )
    return SynthBenchmark(config, trios, image_store, text_store)
