"""Compact Transformer detector over precomputed embeddings.

Four wirings of the same parts:

* ``multimodal_token``: the image and text vectors form a 2-token
  sequence fed through L post-norm encoder layers (no positional
  encoding), mean-pooled, then classified.
* ``text_only`` / ``image_only``: a single token through the same
  encoder; softmax over one position is identically 1, so attention
  degenerates to the value/output projections.
* ``multimodal_dim``: attention-free variant; the encoder is bypassed
  and the head reads the 2m-wide concatenation of both vectors.

The classification head is LN -> linear(d_in -> m/2) -> GELU ->
linear(m/2 -> n), with n=1 (sigmoid/BCE) or n=3 (softmax/CE).

Everything is plain numpy in float64 with hand-written reverse-mode
gradients; forward passes in inference mode are pure functions of
(params, batch). Dropout (rate from the config) applies to attention
weights and the feed-forward output inside encoder layers only, with
masks drawn from a seeded stream so a (seed, shapes) pair always yields
the same masks.

Checkpoints ("DPAR" files) store the config plus every named tensor as
float32, little endian:

    bytes 0-3   magic ``DPAR``
    bytes 4-5   version, u16 (currently 1)
    byte  6     mode code (0 token, 1 dim, 2 text_only, 3 image_only)
    bytes 7-9   L, h, n (u8 each)
    bytes 10-13 m (u32);  14-17 f (u32);  18-25 dropout (f64)
    bytes 26-29 tensor count (u32)
    tensors     (u16 name length, name UTF-8, u8 rank, rank x u32 dims,
                 float32 payload)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .rng import stream_rng

MODES = ("multimodal_token", "multimodal_dim", "text_only", "image_only")
UNIMODAL_MODES = ("text_only", "image_only")

LN_EPS = 1e-5

CHECKPOINT_MAGIC = b"DPAR"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHBBBBIIdI")


@dataclass(frozen=True)
class DetectorConfig:
    mode: str
    n: int
    m: int = 768
    L: int = 1
    h: int = 2
    f: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n not in (1, 3):
            raise ValueError(f"n must be 1 or 3, got {self.n}")
        if self.m < 2 or self.m % 2:
            raise ValueError(f"m must be even and >= 2, got {self.m}")
        if self.m % self.h:
            raise ValueError(f"m={self.m} not divisible by h={self.h}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.L < 1 or self.f < 1:
            raise ValueError("L and f must be positive")

    @property
    def uses_encoder(self) -> bool:
        return self.mode != "multimodal_dim"

    @property
    def head_in(self) -> int:
        return 2 * self.m if self.mode == "multimodal_dim" else self.m

    @property
    def tokens(self) -> int:
        return 1 if self.mode in UNIMODAL_MODES else 2


@dataclass
class Batch:
    image_vectors: np.ndarray | None
    text_vectors: np.ndarray | None
    labels: np.ndarray

    def size(self) -> int:
        return len(self.labels)


def parameter_shapes(config: DetectorConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor enumeration; also fixes checkpoint and update order."""
    m, f = config.m, config.f
    shapes: dict[str, tuple[int, ...]] = {}
    if config.uses_encoder:
        for li in range(config.L):
            p = f"layers.{li}"
            for name in ("wq", "wk", "wv", "wo"):
                shapes[f"{p}.attn.{name}"] = (m, m)
            for name in ("bq", "bk", "bv", "bo"):
                shapes[f"{p}.attn.{name}"] = (m,)
            shapes[f"{p}.ln1.gain"] = (m,)
            shapes[f"{p}.ln1.bias"] = (m,)
            shapes[f"{p}.ffn.w1"] = (m, f)
            shapes[f"{p}.ffn.b1"] = (f,)
            shapes[f"{p}.ffn.w2"] = (f, m)
            shapes[f"{p}.ffn.b2"] = (m,)
            shapes[f"{p}.ln2.gain"] = (m,)
            shapes[f"{p}.ln2.bias"] = (m,)
    shapes["head.ln.gain"] = (config.head_in,)
    shapes["head.ln.bias"] = (config.head_in,)
    shapes["head.w0"] = (config.head_in, m // 2)
    shapes["head.b0"] = (m // 2,)
    shapes["head.w1"] = (m // 2, config.n)
    shapes["head.b1"] = (config.n,)
    return shapes


def init_params(config: DetectorConfig, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = stream_rng(seed, "init")
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-CDF GELU (the tanh approximation is not close enough
    for the double-precision oracles used in the tests)."""
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def _layer_norm(x, gain, bias):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * inv
    return gain * xhat + bias, (xhat, inv, gain)


def _layer_norm_backward(dy, ln_cache):
    xhat, inv, gain = ln_cache
    dgain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbias = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgain, dbias


def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _dropout_mask(rng, shape, rate):
    if rate == 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _split_heads(x, h):
    b, t, m = x.shape
    return x.reshape(b, t, h, m // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _rows(x):
    """Token rows flattened to 2-D so projections are single GEMMs."""
    return x.reshape(-1, x.shape[-1])


def _attention_forward(params, prefix, x, h, attn_mask):
    b, t, m = x.shape
    xf = _rows(x)

    def proj(name):
        rows = xf @ params[f"{prefix}.w{name}"] + params[f"{prefix}.b{name}"]
        return _split_heads(rows.reshape(b, t, m), h)

    q, k, v = proj("q"), proj("k"), proj("v")
    scale = 1.0 / np.sqrt(q.shape[-1])
    # einsum instead of stacked matmul: one pass instead of b*h tiny GEMMs
    scores = np.einsum("bhtd,bhsd->bhts", q, k) * scale
    attn = _softmax(scores)
    attn_used = attn if attn_mask is None else attn * attn_mask
    ctx = _merge_heads(np.einsum("bhts,bhsd->bhtd", attn_used, v))
    out = (_rows(ctx) @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]).reshape(x.shape)
    cache = {"x": x, "q": q, "k": k, "v": v, "attn": attn, "ctx": ctx, "scale": scale}
    return out, cache


def _attention_backward(params, prefix, dout, cache, h, attn_mask, grads):
    x, q, k, v = cache["x"], cache["q"], cache["k"], cache["v"]
    attn, ctx, scale = cache["attn"], cache["ctx"], cache["scale"]
    b, t, m = x.shape
    flat = lambda a: a.reshape(-1, a.shape[-1])

    grads[f"{prefix}.wo"] += flat(ctx).T @ flat(dout)
    grads[f"{prefix}.bo"] += dout.sum(axis=(0, 1))
    dctx = _split_heads(dout @ params[f"{prefix}.wo"].T, h)

    attn_used = attn if attn_mask is None else attn * attn_mask
    dattn_used = np.einsum("bhtd,bhsd->bhts", dctx, v)
    dv = np.einsum("bhts,bhtd->bhsd", attn_used, dctx)
    dattn = dattn_used if attn_mask is None else dattn_used * attn_mask
    dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    dq = np.einsum("bhts,bhsd->bhtd", dscores, k) * scale
    dk = np.einsum("bhts,bhtd->bhsd", dscores, q) * scale

    for name, grad in (("q", dq), ("k", dk), ("v", dv)):
        flat_grad = flat(_merge_heads(grad))
        grads[f"{prefix}.w{name}"] += flat(x).T @ flat_grad
        grads[f"{prefix}.b{name}"] += flat_grad.sum(axis=0)
    dx = (
        _merge_heads(dq) @ params[f"{prefix}.wq"].T
        + _merge_heads(dk) @ params[f"{prefix}.wk"].T
        + _merge_heads(dv) @ params[f"{prefix}.wv"].T
    )
    return dx


def _layer_forward(params, li, x, h, masks):
    prefix = f"layers.{li}"
    attn_out, attn_cache = _attention_forward(
        params, f"{prefix}.attn", x, h, masks["attn"]
    )
    res1 = x + attn_out
    x_mid, ln1_cache = _layer_norm(
        res1, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"]
    )
    z1 = _rows(x_mid) @ params[f"{prefix}.ffn.w1"] + params[f"{prefix}.ffn.b1"]
    a1 = gelu(z1)
    z2 = (a1 @ params[f"{prefix}.ffn.w2"] + params[f"{prefix}.ffn.b2"]).reshape(x.shape)
    ffn_out = z2 if masks["ffn"] is None else z2 * masks["ffn"]
    res2 = x_mid + ffn_out
    x_out, ln2_cache = _layer_norm(
        res2, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"]
    )
    cache = {
        "attn": attn_cache,
        "ln1": ln1_cache,
        "x_mid": x_mid,
        "z1": z1,
        "a1": a1,
        "ln2": ln2_cache,
        "masks": masks,
    }
    return x_out, cache


def _layer_backward(params, li, dx_out, cache, h, grads):
    prefix = f"layers.{li}"
    masks = cache["masks"]
    flat = lambda a: a.reshape(-1, a.shape[-1])

    dres2, dg2, db2 = _layer_norm_backward(dx_out, cache["ln2"])
    grads[f"{prefix}.ln2.gain"] += dg2
    grads[f"{prefix}.ln2.bias"] += db2

    dz2 = flat(dres2 if masks["ffn"] is None else dres2 * masks["ffn"])
    grads[f"{prefix}.ffn.w2"] += cache["a1"].T @ dz2
    grads[f"{prefix}.ffn.b2"] += dz2.sum(axis=0)
    dz1 = (dz2 @ params[f"{prefix}.ffn.w2"].T) * gelu_grad(cache["z1"])
    grads[f"{prefix}.ffn.w1"] += flat(cache["x_mid"]).T @ dz1
    grads[f"{prefix}.ffn.b1"] += dz1.sum(axis=0)
    dx_mid = dres2 + (dz1 @ params[f"{prefix}.ffn.w1"].T).reshape(dres2.shape)

    dres1, dg1, db1 = _layer_norm_backward(dx_mid, cache["ln1"])
    grads[f"{prefix}.ln1.gain"] += dg1
    grads[f"{prefix}.ln1.bias"] += db1

    dx = dres1 + _attention_backward(
        params, f"{prefix}.attn", dres1, cache["attn"], h, masks["attn"], grads
    )
    return dx


def _head_forward(params, features):
    xh, ln_cache = _layer_norm(features, params["head.ln.gain"], params["head.ln.bias"])
    z0 = xh @ params["head.w0"] + params["head.b0"]
    a0 = gelu(z0)
    logits = a0 @ params["head.w1"] + params["head.b1"]
    cache = {"features": features, "ln": ln_cache, "xh": xh, "z0": z0, "a0": a0}
    return logits, cache


def _head_backward(params, dlogits, cache, grads):
    grads["head.w1"] += cache["a0"].T @ dlogits
    grads["head.b1"] += dlogits.sum(axis=0)
    dz0 = (dlogits @ params["head.w1"].T) * gelu_grad(cache["z0"])
    grads["head.w0"] += cache["xh"].T @ dz0
    grads["head.b0"] += dz0.sum(axis=0)
    dxh = dz0 @ params["head.w0"].T
    dfeatures, dgain, dbias = _layer_norm_backward(dxh, cache["ln"])
    grads["head.ln.gain"] += dgain
    grads["head.ln.bias"] += dbias
    return dfeatures


def _stack_tokens(config: DetectorConfig, batch: Batch) -> np.ndarray:
    img, txt = batch.image_vectors, batch.text_vectors

    def as64(a, name):
        arr = np.asarray(a, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != config.m:
            raise ValueError(f"{name} must have shape (B, {config.m}), got {arr.shape}")
        return arr

    if config.mode in ("multimodal_token", "multimodal_dim"):
        if img is None or txt is None:
            raise ValueError(f"mode {config.mode} needs both modalities")
        img, txt = as64(img, "image_vectors"), as64(txt, "text_vectors")
        if img.shape[0] != txt.shape[0]:
            raise ValueError("image and text batches disagree on size")
        if config.mode == "multimodal_dim":
            return np.concatenate([img, txt], axis=1)
        return np.stack([img, txt], axis=1)
    if config.mode == "text_only":
        if txt is None or img is not None:
            raise ValueError("text_only takes text_vectors and no image_vectors")
        return as64(txt, "text_vectors")[:, None, :]
    if img is None or txt is not None:
        raise ValueError("image_only takes image_vectors and no text_vectors")
    return as64(img, "image_vectors")[:, None, :]


def draw_dropout_masks(
    config: DetectorConfig, batch_size: int, dropout_seed: int
) -> list[dict]:
    """Per-layer attention and FFN masks; identical for identical seeds."""
    rng = stream_rng(dropout_seed, "dropout")
    t = config.tokens
    masks = []
    for _ in range(config.L):
        masks.append(
            {
                "attn": _dropout_mask(
                    rng, (batch_size, config.h, t, t), config.dropout
                ),
                "ffn": _dropout_mask(rng, (batch_size, t, config.m), config.dropout),
            }
        )
    return masks


def forward(
    params: dict[str, np.ndarray],
    config: DetectorConfig,
    batch: Batch,
    training: bool = False,
    dropout_seed: int = 0,
):
    """Compute logits (B, n). With ``training=True`` dropout is active and
    a cache for :func:`backward` is returned alongside the logits."""
    tokens = _stack_tokens(config, batch)
    if len(batch.labels) != tokens.shape[0]:
        raise ValueError("labels do not match batch size")

    if not config.uses_encoder:
        features = tokens
        layer_caches: list = []
        layer_inputs: list = []
        masks = []
    else:
        if training and config.dropout > 0.0:
            masks = draw_dropout_masks(config, tokens.shape[0], dropout_seed)
        else:
            masks = [{"attn": None, "ffn": None} for _ in range(config.L)]
        x = tokens
        layer_caches = []
        layer_inputs = []
        for li in range(config.L):
            layer_inputs.append(x)
            x, cache = _layer_forward(params, li, x, config.h, masks[li])
            layer_caches.append(cache)
        features = x.mean(axis=1)

    logits, head_cache = _head_forward(params, features)
    if not training:
        return logits
    full_cache = {
        "tokens": tokens,
        "layer_inputs": layer_inputs,
        "layers": layer_caches,
        "head": head_cache,
        "logits": logits,
        "masks": masks,
    }
    return logits, full_cache


def loss(logits: np.ndarray, labels: np.ndarray, n: int) -> float:
    """Mean binary (n=1) or categorical (n=3) cross-entropy, stable form."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != n:
        raise ValueError(f"logits must have shape (B, {n}), got {logits.shape}")
    if len(labels) != logits.shape[0]:
        raise ValueError("labels do not match logits batch size")
    if n == 1:
        y = labels.astype(np.float64)
        if np.any((y != 0.0) & (y != 1.0)):
            raise ValueError("binary labels must be 0 or 1")
        z = logits[:, 0]
        # softplus(z) - y*z, computed without overflow
        return float(np.mean(np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))))
    y = labels.astype(np.int64)
    if np.any((y < 0) | (y >= n)):
        raise ValueError(f"labels must be in [0, {n}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    return float(np.mean(lse - logits[np.arange(len(y)), y]))


def _loss_grad(logits: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    b = logits.shape[0]
    if n == 1:
        y = labels.astype(np.float64)
        sig = 1.0 / (1.0 + np.exp(-logits[:, 0]))
        return ((sig - y) / b)[:, None]
    probs = _softmax(logits)
    grad = probs.copy()
    grad[np.arange(b), labels.astype(np.int64)] -= 1.0
    return grad / b


def backward(
    params: dict[str, np.ndarray],
    config: DetectorConfig,
    batch: Batch,
    cache: dict,
) -> dict[str, np.ndarray]:
    """Exact gradients of the mean loss w.r.t. every parameter, reusing the
    dropout masks recorded by the training-mode forward pass."""
    if not isinstance(cache, dict) or "head" not in cache:
        raise RuntimeError("backward needs the cache from forward(training=True)")
    grads = {name: np.zeros_like(value) for name, value in params.items()}
    dlogits = _loss_grad(cache["logits"], batch.labels, config.n)
    dfeatures = _head_backward(params, dlogits, cache["head"], grads)
    if config.uses_encoder:
        tokens = cache["tokens"]
        dx = np.repeat(
            dfeatures[:, None, :] / tokens.shape[1], tokens.shape[1], axis=1
        )
        for li in range(config.L - 1, -1, -1):
            dx = _layer_backward(params, li, dx, cache["layers"][li], config.h, grads)
    return grads


def predict(params: dict[str, np.ndarray], config: DetectorConfig, batch: Batch):
    """Class predictions: argmax for n=3, sigmoid >= 0.5 (logit >= 0) for n=1."""
    logits = forward(params, config, batch, training=False)
    if config.n == 1:
        return (logits[:, 0] >= 0.0).astype(np.int64)
    return logits.argmax(axis=1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_params(
    params: dict[str, np.ndarray], config: DetectorConfig, path: str | Path
) -> None:
    shapes = parameter_shapes(config)
    missing = [n for n in shapes if n not in params]
    if missing:
        raise ValueError(f"params missing tensors: {missing[:3]}")
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(
                CHECKPOINT_MAGIC,
                CHECKPOINT_VERSION,
                MODES.index(config.mode),
                config.L,
                config.h,
                config.n,
                config.m,
                config.f,
                config.dropout,
                len(shapes),
            )
        )
        for name in shapes:
            tensor = np.ascontiguousarray(params[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.tobytes())


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], DetectorConfig]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: file shorter than the checkpoint header")
    (magic, version, mode_code, L, h, n, m, f, dropout, count) = _CKPT_HEADER.unpack_from(
        data, 0
    )
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if mode_code >= len(MODES):
        raise ValueError(f"{path}: unknown mode code {mode_code}")
    config = DetectorConfig(
        mode=MODES[mode_code], n=n, m=m, L=L, h=h, f=f, dropout=float(dropout)
    )
    offset = _CKPT_HEADER.size
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(data):
            raise ValueError(f"{path}: tensor table truncated at byte {offset}")
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + name_len + 1 > len(data):
            raise ValueError(f"{path}: tensor table truncated at byte {offset}")
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", data, offset)
        offset += 1
        if offset + 4 * rank > len(data):
            raise ValueError(f"{path}: tensor {name!r} truncated at byte {offset}")
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        end = offset + 4 * size
        if end > len(data):
            raise ValueError(
                f"{path}: tensor {name!r} truncated (expected {end} bytes, "
                f"file has {len(data)})"
            )
        tensor = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
        params[name] = tensor.reshape(dims).astype(np.float64)
        offset = end
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    expected = parameter_shapes(config)
    if set(params) != set(expected):
        raise ValueError(f"{path}: tensor names do not match the config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(
                f"{path}: tensor {name!r} has shape {params[name].shape}, "
                f"expected {shape}"
            )
    return params, config
