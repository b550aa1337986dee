import math

import numpy as np
import pytest
from scipy.special import erf

from chasmakit import detector as D
from gradcheck import (
    batched_suffix_losses,
    check_gradients,
    check_gradients_batched,
    random_batch,
    suffix_loss,
)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        D.DetectorConfig(mode="text_only", n=1, m=10, h=4)
    with pytest.raises(ValueError, match="n must be"):
        D.DetectorConfig(mode="text_only", n=2, m=8)
    with pytest.raises(ValueError, match="dropout"):
        D.DetectorConfig(mode="text_only", n=1, m=8, dropout=1.0)
    with pytest.raises(ValueError, match="unknown mode"):
        D.DetectorConfig(mode="bimodal", n=1, m=8)


def test_init_deterministic():
    cfg = D.DetectorConfig(mode="multimodal_token", n=3, m=8, L=2, h=2, f=16)
    a = D.init_params(cfg, 4)
    b = D.init_params(cfg, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = D.init_params(cfg, 5)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_init_gains_ones_biases_zero():
    cfg = D.DetectorConfig(mode="text_only", n=1, m=8, L=1, h=2, f=16)
    params = D.init_params(cfg, 0)
    for name, value in params.items():
        if name.endswith(".gain"):
            assert np.all(value == 1.0)
        elif value.ndim == 1:
            assert np.all(value == 0.0)


def test_init_glorot_bound():
    cfg = D.DetectorConfig(mode="multimodal_token", n=3, m=32, L=1, h=4, f=64)
    params = D.init_params(cfg, 1)
    for name, value in params.items():
        if value.ndim == 2:
            bound = math.sqrt(6.0 / sum(value.shape))
            assert np.abs(value).max() <= bound


def test_unimodal_attention_weight_is_exactly_one():
    cfg = D.DetectorConfig(mode="text_only", n=1, m=8, L=1, h=2, f=16)
    params = D.init_params(cfg, 2)
    batch = random_batch(cfg, 4)
    _, cache = D.forward(params, cfg, batch, training=True, dropout_seed=0)
    attn = cache["layers"][0]["attn"]["attn"]
    assert attn.shape[-2:] == (1, 1)
    assert np.all(attn == 1.0)


def test_unimodal_attention_equals_value_path_bitwise():
    # With a single token the attention block must reduce to the value and
    # output projections exactly, not just approximately.
    cfg = D.DetectorConfig(mode="image_only", n=3, m=8, L=1, h=4, f=16, dropout=0.0)
    params = D.init_params(cfg, 3)
    batch = random_batch(cfg, 5)
    _, cache = D.forward(params, cfg, batch, training=True, dropout_seed=0)
    x = cache["layer_inputs"][0]
    rows = x.reshape(-1, 8)
    v = rows @ params["layers.0.attn.wv"] + params["layers.0.attn.bv"]
    value_path = (v @ params["layers.0.attn.wo"] + params["layers.0.attn.bo"]).reshape(
        x.shape
    )
    attn_cache = cache["layers"][0]["attn"]
    recomputed = (
        attn_cache["ctx"].reshape(-1, 8) @ params["layers.0.attn.wo"]
        + params["layers.0.attn.bo"]
    ).reshape(x.shape)
    assert np.array_equal(value_path, recomputed)


def test_zero_inputs_zero_logits():
    for mode in D.MODES:
        cfg = D.DetectorConfig(mode=mode, n=3, m=8, L=2, h=2, f=16)
        params = D.init_params(cfg, 6)
        b = 3
        img = np.zeros((b, 8)) if mode != "text_only" else None
        txt = np.zeros((b, 8)) if mode != "image_only" else None
        batch = D.Batch(img, txt, np.zeros(b, dtype=np.int64))
        logits = D.forward(params, cfg, batch, training=False)
        assert np.all(logits == 0.0), mode


def test_inference_deterministic():
    cfg = D.DetectorConfig(mode="multimodal_token", n=1, m=16, L=2, h=4, f=32)
    params = D.init_params(cfg, 7)
    batch = random_batch(cfg, 6)
    a = D.forward(params, cfg, batch, training=False)
    b = D.forward(params, cfg, batch, training=False)
    assert np.array_equal(a, b)


def test_token_permutation_symmetry():
    cfg = D.DetectorConfig(mode="multimodal_token", n=3, m=16, L=2, h=4, f=32)
    params = D.init_params(cfg, 8)
    batch = random_batch(cfg, 5)
    swapped = D.Batch(batch.text_vectors, batch.image_vectors, batch.labels)
    a = D.forward(params, cfg, batch, training=False)
    b = D.forward(params, cfg, swapped, training=False)
    assert np.max(np.abs(a - b)) < 1e-5


def test_mode_modality_requirements():
    cfg = D.DetectorConfig(mode="text_only", n=1, m=8)
    params = D.init_params(cfg, 0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 8))
    with pytest.raises(ValueError, match="text_only"):
        D.forward(params, cfg, D.Batch(x, x, np.zeros(2)), training=False)
    cfg2 = D.DetectorConfig(mode="multimodal_token", n=1, m=8)
    params2 = D.init_params(cfg2, 0)
    with pytest.raises(ValueError, match="both"):
        D.forward(params2, cfg2, D.Batch(None, x, np.zeros(2)), training=False)


def test_dim_mode_has_head_params_only():
    cfg = D.DetectorConfig(mode="multimodal_dim", n=3, m=8, L=4, h=2, f=64)
    params = D.init_params(cfg, 0)
    assert all(name.startswith("head.") for name in params)
    assert params["head.w0"].shape == (16, 4)


def test_forward_matches_straight_line_reimplementation():
    # Everything below is written out literally and independently of the
    # module internals: one layer, two tokens, post-norm, mean pooling.
    m, h, L, f, n, b = 8, 2, 1, 16, 3, 4
    cfg = D.DetectorConfig(mode="multimodal_token", n=n, m=m, L=L, h=h, f=f)
    params = D.init_params(cfg, 12)
    rng = np.random.default_rng(99)
    img = rng.standard_normal((b, m))
    txt = rng.standard_normal((b, m))
    batch = D.Batch(img, txt, np.zeros(b, dtype=np.int64))
    got = D.forward(params, cfg, batch, training=False)

    def ln(x, gain, bias):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return gain * (x - mu) / np.sqrt(var + 1e-5) + bias

    def gelu(x):
        return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))

    p = {k: v.copy() for k, v in params.items()}
    expected = np.zeros((b, n))
    for i in range(b):
        x = np.stack([img[i], txt[i]])  # (2, m)
        q = x @ p["layers.0.attn.wq"] + p["layers.0.attn.bq"]
        k = x @ p["layers.0.attn.wk"] + p["layers.0.attn.bk"]
        v = x @ p["layers.0.attn.wv"] + p["layers.0.attn.bv"]
        dh = m // h
        heads = []
        for hi in range(h):
            qs = q[:, hi * dh : (hi + 1) * dh]
            ks = k[:, hi * dh : (hi + 1) * dh]
            vs = v[:, hi * dh : (hi + 1) * dh]
            scores = qs @ ks.T / math.sqrt(dh)
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            attn = e / e.sum(axis=1, keepdims=True)
            heads.append(attn @ vs)
        ctx = np.concatenate(heads, axis=1)
        attn_out = ctx @ p["layers.0.attn.wo"] + p["layers.0.attn.bo"]
        x = ln(x + attn_out, p["layers.0.ln1.gain"], p["layers.0.ln1.bias"])
        ffn = gelu(x @ p["layers.0.ffn.w1"] + p["layers.0.ffn.b1"])
        ffn = ffn @ p["layers.0.ffn.w2"] + p["layers.0.ffn.b2"]
        x = ln(x + ffn, p["layers.0.ln2.gain"], p["layers.0.ln2.bias"])
        pooled = x.mean(axis=0)
        xh = ln(pooled, p["head.ln.gain"], p["head.ln.bias"])
        hidden = gelu(xh @ p["head.w0"] + p["head.b0"])
        expected[i] = hidden @ p["head.w1"] + p["head.b1"]
    assert np.max(np.abs(got - expected)) < 1e-10


def test_loss_reference_values():
    logits1 = np.zeros((4, 1))
    assert abs(D.loss(logits1, np.array([0, 1, 0, 1]), 1) - math.log(2)) < 1e-12
    logits3 = np.zeros((6, 3))
    assert abs(D.loss(logits3, np.array([0, 1, 2, 0, 1, 2]), 3) - math.log(3)) < 1e-12


def test_loss_matches_naive_formula():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((32, 3))
    labels = rng.integers(0, 3, 32)
    naive = -np.mean(
        np.log(
            np.exp(logits)[np.arange(32), labels] / np.exp(logits).sum(axis=1)
        )
    )
    assert abs(D.loss(logits, labels, 3) - naive) < 1e-12

    z = rng.standard_normal((32, 1))
    y = rng.integers(0, 2, 32)
    sig = 1.0 / (1.0 + np.exp(-z[:, 0]))
    naive_bce = -np.mean(y * np.log(sig) + (1 - y) * np.log(1 - sig))
    assert abs(D.loss(z, y, 1) - naive_bce) < 1e-12


def test_loss_label_range():
    with pytest.raises(ValueError, match="labels"):
        D.loss(np.zeros((2, 3)), np.array([0, 3]), 3)
    with pytest.raises(ValueError, match="binary"):
        D.loss(np.zeros((2, 1)), np.array([0, 2]), 1)


def test_backward_requires_cache():
    cfg = D.DetectorConfig(mode="text_only", n=1, m=8)
    params = D.init_params(cfg, 0)
    with pytest.raises(RuntimeError, match="cache"):
        D.backward(params, cfg, random_batch(cfg, 2), cache=None)


def test_backward_symmetric_batch_zero_head_bias_grad():
    cfg = D.DetectorConfig(mode="text_only", n=1, m=8, L=1, h=2, f=16)
    params = D.init_params(cfg, 1)
    txt = np.zeros((2, 8))
    batch = D.Batch(None, txt, np.array([0, 1]))
    _, cache = D.forward(params, cfg, batch, training=True, dropout_seed=0)
    grads = D.backward(params, cfg, batch, cache)
    # Identical zero inputs with opposite labels: the sigmoid errors
    # (0.5 - 0) and (0.5 - 1) cancel in the final bias gradient.
    assert np.all(grads["head.b1"] == 0.0)


@pytest.mark.parametrize("mode", D.MODES)
@pytest.mark.parametrize("n", [1, 3])
def test_gradients_small_config(mode, n):
    cfg = D.DetectorConfig(mode=mode, n=n, m=8, L=1, h=2, f=16, dropout=0.0)
    params = D.init_params(cfg, 21)
    batch = random_batch(cfg, 3)
    worst, name = check_gradients(cfg, params, batch)
    assert worst < 1e-4, f"{name}: {worst}"


def test_gradients_with_dropout_and_depth():
    cfg = D.DetectorConfig(mode="multimodal_token", n=3, m=8, L=2, h=4, f=16,
                           dropout=0.1)
    params = D.init_params(cfg, 22)
    batch = random_batch(cfg, 3)
    worst, name = check_gradients(cfg, params, batch, dropout_seed=5)
    assert worst < 1e-4, f"{name}: {worst}"


def test_suffix_loss_equals_full_forward():
    cfg = D.DetectorConfig(mode="multimodal_token", n=3, m=8, L=3, h=2, f=32,
                           dropout=0.1)
    params = D.init_params(cfg, 9)
    batch = random_batch(cfg, 4)
    logits, cache = D.forward(params, cfg, batch, training=True, dropout_seed=2)
    full = D.loss(logits, batch.labels, cfg.n)
    for layer_from in [None, 0, 1, 2]:
        assert suffix_loss(params, cfg, cache, batch.labels, layer_from) == full


def test_batched_suffix_equals_serial_exactly():
    cfg = D.DetectorConfig(mode="multimodal_token", n=1, m=8, L=2, h=4, f=32,
                           dropout=0.1)
    params = D.init_params(cfg, 10)
    batch = random_batch(cfg, 2)
    _, cache = D.forward(params, cfg, batch, training=True, dropout_seed=3)
    rng = np.random.default_rng(0)
    for name in params:
        idx = rng.choice(params[name].size, size=min(4, params[name].size),
                         replace=False)
        lp, lm = batched_suffix_losses(params, cfg, cache, batch.labels, name,
                                       idx, 1e-5)
        layer_from = int(name.split(".")[1]) if name.startswith("layers.") else None
        flat = params[name].ravel()
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + 1e-5
            assert lp[j] == suffix_loss(params, cfg, cache, batch.labels, layer_from)
            flat[i] = orig - 1e-5
            assert lm[j] == suffix_loss(params, cfg, cache, batch.labels, layer_from)
            flat[i] = orig


def test_batched_gradcheck_matches_plain():
    cfg = D.DetectorConfig(mode="image_only", n=3, m=8, L=1, h=2, f=16, dropout=0.1)
    params = D.init_params(cfg, 13)
    batch = random_batch(cfg, 2)
    worst_a, _ = check_gradients(cfg, params, batch, dropout_seed=1)
    worst_b, _ = check_gradients_batched(cfg, params, batch, dropout_seed=1)
    assert worst_a < 1e-4 and worst_b < 1e-4
    assert abs(worst_a - worst_b) < 1e-12


def test_predict_rules():
    cfg = D.DetectorConfig(mode="multimodal_dim", n=1, m=8)
    params = {k: np.zeros(s) for k, s in D.parameter_shapes(cfg).items()}
    params["head.ln.gain"] = np.ones(16)
    params["head.b1"] = np.array([0.0])
    rng = np.random.default_rng(0)
    batch = D.Batch(rng.standard_normal((3, 8)), rng.standard_normal((3, 8)),
                    np.zeros(3))
    # zero weights give logit 0 everywhere; the 0.5 threshold maps that to 1
    assert np.all(D.predict(params, cfg, batch) == 1)


def test_checkpoint_roundtrip(tmp_path):
    cfg = D.DetectorConfig(mode="multimodal_token", n=3, m=8, L=2, h=2, f=16,
                           dropout=0.1)
    params = D.init_params(cfg, 3)
    path = tmp_path / "model.dpar"
    D.save_params(params, cfg, path)
    loaded, loaded_cfg = D.load_params(path)
    assert loaded_cfg == cfg
    for name in params:
        assert np.array_equal(loaded[name], params[name].astype(np.float32))
    # A second save of the loaded params reproduces the file byte for byte.
    path2 = tmp_path / "model2.dpar"
    D.save_params(loaded, loaded_cfg, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_errors(tmp_path):
    cfg = D.DetectorConfig(mode="text_only", n=1, m=8, L=1, h=2, f=16)
    params = D.init_params(cfg, 0)
    path = tmp_path / "m.dpar"
    D.save_params(params, cfg, path)
    data = bytearray(path.read_bytes())
    bad = tmp_path / "bad.dpar"
    bad.write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(ValueError, match="magic"):
        D.load_params(bad)
    data[4:6] = (7).to_bytes(2, "little")
    bad.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="version 7"):
        D.load_params(bad)
    trunc = tmp_path / "trunc.dpar"
    trunc.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ValueError, match="truncated"):
        D.load_params(trunc)
