import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chasmakit.embstore import (
    EmbeddingStore,
    NormalizationError,
    StoreCorruptionError,
    StoreFormatError,
    normalize_rows,
    open_store,
    unit_normalize,
    validate_store,
    write_store,
)


def test_roundtrip_identity(tmp_path):
    path = tmp_path / "t.embs"
    store = write_store([("a", [1, 0]), ("b", [0, 1])], 2, "text", path)
    assert store.count == 2
    reopened = open_store(path)
    assert reopened.ids == ["a", "b"]
    assert reopened.dim == 2 and reopened.modality == "text"
    assert np.array_equal(reopened.vectors, store.vectors)


def test_roundtrip_large_random_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    vectors = rng.standard_normal((10_000, 768)).astype(np.float32)
    ids = [f"v{i}" for i in range(10_000)]
    path = tmp_path / "big.embs"
    write_store(zip(ids, vectors), 768, "image", path)
    reopened = open_store(path)
    assert reopened.get("v7123").tobytes() == vectors[7123].tobytes()
    assert np.array_equal(reopened.vectors, vectors)
    assert reopened.ids == ids


def test_duplicate_id_rejected(tmp_path):
    with pytest.raises(ValueError, match="'a'"):
        write_store([("a", [1.0]), ("a", [2.0])], 1, "text", tmp_path / "x.embs")


def test_dimension_mismatch_names_index(tmp_path):
    with pytest.raises(ValueError, match="record 1"):
        write_store([("a", [1, 2]), ("b", [1, 2, 3])], 2, "text", tmp_path / "x.embs")


def test_oversized_id_rejected(tmp_path):
    with pytest.raises(ValueError, match="65 bytes"):
        write_store([("x" * 65, [1.0])], 1, "text", tmp_path / "x.embs")


def test_empty_store_roundtrip(tmp_path):
    path = tmp_path / "empty.embs"
    write_store([], 4, "image", path)
    store = open_store(path)
    assert store.count == 0 and store.dim == 4
    assert validate_store(store).ok


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.embs"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(StoreFormatError, match="magic"):
        open_store(path)


def test_bad_version(tmp_path):
    path = tmp_path / "v.embs"
    write_store([("a", [1.0])], 1, "text", path)
    data = bytearray(path.read_bytes())
    data[4:6] = (999).to_bytes(2, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(StoreFormatError, match="999"):
        open_store(path)


def test_nonzero_reserved_byte(tmp_path):
    path = tmp_path / "r.embs"
    write_store([("a", [1.0])], 1, "text", path)
    data = bytearray(path.read_bytes())
    data[7] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(StoreFormatError, match="reserved"):
        open_store(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.embs"
    write_store([("a", [1, 2, 3]), ("b", [4, 5, 6])], 3, "image", path)
    full = path.read_bytes()
    # Cut inside the second vector: 2 bytes into its final float.
    path.write_bytes(full[:-2])
    with pytest.raises(StoreCorruptionError, match=f"expected {len(full)}"):
        open_store(path)


def test_truncated_id_table(tmp_path):
    path = tmp_path / "t.embs"
    write_store([("abcdef", [1.0])], 1, "image", path)
    path.write_bytes(path.read_bytes()[:22])  # header + length prefix + 2 id bytes
    with pytest.raises(StoreCorruptionError, match="id table"):
        open_store(path)


def test_unit_normalize_345():
    assert np.allclose(unit_normalize(np.array([3.0, 4.0])), [0.6, 0.8])


def test_unit_normalize_zero_vector():
    with pytest.raises(NormalizationError):
        unit_normalize(np.zeros(5))
    with pytest.raises(NormalizationError):
        normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_unit_normalize_random_768():
    rng = np.random.default_rng(7)
    v = rng.standard_normal(768)
    assert abs(np.linalg.norm(unit_normalize(v)) - 1.0) < 1e-6


@settings(deadline=None)
@given(
    st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=32).filter(
        lambda xs: any(abs(x) > 1e-3 for x in xs)
    )
)
def test_unit_normalize_idempotent(xs):
    v = np.array(xs)
    once = unit_normalize(v)
    twice = unit_normalize(once)
    assert np.max(np.abs(twice - once)) < 1e-6


@settings(deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=16).filter(
        lambda xs: any(abs(x) > 1e-3 for x in xs)
    ),
    st.floats(1e-3, 1e3),
)
def test_unit_normalize_scale_invariant(xs, c):
    v = np.array(xs)
    assert np.max(np.abs(unit_normalize(c * v) - unit_normalize(v))) < 1e-6


def test_cosine_matches_textbook_formula():
    rng = np.random.default_rng(5)
    for _ in range(200):
        a = rng.standard_normal(64)
        b = rng.standard_normal(64)
        via_normalized = float(np.dot(unit_normalize(a), unit_normalize(b)))
        textbook = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
        assert abs(via_normalized - textbook) < 1e-5


def test_validate_clean_store():
    rng = np.random.default_rng(1)
    store = EmbeddingStore(
        4, "text", ["a", "b"], rng.standard_normal((2, 4)).astype(np.float32)
    )
    report = validate_store(store)
    assert report.ok
    assert report.to_dict()["ok"] is True


def test_validate_flags_nan():
    vectors = np.ones((3, 2), dtype=np.float32)
    vectors[1, 0] = np.nan
    store = EmbeddingStore(2, "text", ["a", "b", "c"], vectors)
    report = validate_store(store)
    assert report.nan_count == 1
    assert not report.ok


def test_validate_flags_zero_rows():
    vectors = np.ones((3, 2), dtype=np.float32)
    vectors[2] = 0.0
    store = EmbeddingStore(2, "image", ["a", "b", "z"], vectors)
    report = validate_store(store)
    assert report.zero_vector_ids == ["z"]


def test_validate_flags_duplicate_ids():
    store = EmbeddingStore(2, "text", ["a", "a"], np.ones((2, 2), dtype=np.float32))
    report = validate_store(store)
    assert report.duplicate_ids == ["a"]


def test_lookup_names_unknown_id():
    store = EmbeddingStore(2, "image", ["a"], np.ones((1, 2), dtype=np.float32))
    with pytest.raises(KeyError, match="image id 'b'"):
        store.get("b")
