import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ease.tensors import (
    AttentionMap,
    BadMagicError,
    DtypeMismatchError,
    FeatureMap,
    LabelMap,
    TruncatedPayloadError,
    cosine_sim,
    l2_normalize,
    read_array,
    read_feature_map,
    read_label_map,
    read_tensor,
    spatial_gradient,
    write_array,
    write_tensor,
    read_bundle,
    write_bundle,
)


def test_feature_map_invariants():
    with pytest.raises(ValueError):
        FeatureMap(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        FeatureMap(np.full((1, 2, 2), np.nan))
    fm = FeatureMap(np.arange(12, dtype=np.float32).reshape(2, 2, 3))
    assert (fm.channels, fm.height, fm.width) == (2, 2, 3)
    # pixels() is the one pixel-vector accessor: row i = vector of pixel i
    px = fm.pixels()
    assert px.shape == (6, 2)
    assert np.array_equal(px[1], fm.data[:, 0, 1])


def test_attention_map_row_sums_checked():
    good = np.full((3, 4), 0.25, dtype=np.float32)
    AttentionMap(good)
    bad = good.copy()
    bad[0, 0] = 0.5
    with pytest.raises(ValueError):
        AttentionMap(bad)


def test_label_map_compact():
    lm = LabelMap(np.array([[0, 5], [9, 5]], dtype=np.uint32))
    c = lm.compact()
    assert np.array_equal(c.labels, [[0, 1], [2, 1]])
    assert list(c.segment_ids()) == [1, 2]


def test_l2_normalize_triangle():
    fm = FeatureMap(np.array([3.0, 4.0], dtype=np.float32).reshape(2, 1, 1))
    out = l2_normalize(fm)
    assert np.allclose(out.data[:, 0, 0], [0.6, 0.8])


def test_l2_normalize_zero_vector_stays_zero():
    fm = FeatureMap(np.zeros((2, 1, 1), dtype=np.float32))
    out = l2_normalize(fm)
    assert np.array_equal(out.data, np.zeros((2, 1, 1), dtype=np.float32))


def test_l2_normalize_matches_per_pixel_loop():
    rng = np.random.default_rng(7)
    fm = FeatureMap(rng.normal(size=(4, 2, 2)).astype(np.float32))
    out = l2_normalize(fm)
    for y in range(2):
        for x in range(2):
            v = fm.data[:, y, x].astype(np.float64)
            expect = v / np.linalg.norm(v)
            assert np.allclose(out.data[:, y, x], expect, atol=1e-6)
            assert abs(np.linalg.norm(out.data[:, y, x]) - 1.0) < 1e-6


def test_cosine_sim_basics():
    assert cosine_sim([1, 0], [1, 0]) == 1.0
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([0, 0], [1, 2]) == 0.0
    assert abs(cosine_sim([1, 2, 2], [2, 1, 2]) - 8.0 / 9.0) < 1e-12


@given(
    st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=8),
    st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=8),
)
@settings(max_examples=200, deadline=None)
def test_cosine_sim_bounded_and_symmetric(a, b):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    s = cosine_sim(a, b)
    assert -1.0 <= s <= 1.0
    assert abs(s - cosine_sim(b, a)) < 1e-12


def _gradient_oracle(f):
    """Straight-line scalar re-statement of the gradient contract."""
    c, h, w = f.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            total = 0.0
            for ch in range(c):
                if w == 1:
                    dx = 0.0
                elif x < w - 1:
                    dx = f[ch, y, x + 1] - f[ch, y, x]
                else:
                    dx = f[ch, y, x] - f[ch, y, x - 1]
                if h == 1:
                    dy = 0.0
                elif y < h - 1:
                    dy = f[ch, y + 1, x] - f[ch, y, x]
                else:
                    dy = f[ch, y, x] - f[ch, y - 1, x]
                total += np.sqrt(dx * dx + dy * dy)
            out[y, x] = total / c
    return out


def test_spatial_gradient_constant_is_zero():
    fm = FeatureMap(np.full((3, 4, 5), 2.5, dtype=np.float32))
    out = spatial_gradient(fm)
    assert np.array_equal(out.data, np.zeros((1, 4, 5), dtype=np.float32))


def test_spatial_gradient_step_edge():
    f = np.zeros((1, 3, 4), dtype=np.float32)
    f[:, :, 2:] = 1.0  # step between columns 1 and 2
    out = spatial_gradient(FeatureMap(f))
    assert np.allclose(out.data[0, :, 1], 1.0)
    assert np.allclose(out.data[0, :, 0], 0.0)
    assert np.allclose(out.data[0, :, 3], 0.0)


def test_spatial_gradient_one_by_one():
    out = spatial_gradient(FeatureMap(np.ones((2, 1, 1), dtype=np.float32)))
    assert np.array_equal(out.data, np.zeros((1, 1, 1), dtype=np.float32))


def test_spatial_gradient_matches_oracle():
    rng = np.random.default_rng(11)
    f = rng.normal(size=(3, 5, 6)).astype(np.float32)
    out = spatial_gradient(FeatureMap(f))
    assert np.allclose(out.data[0], _gradient_oracle(f.astype(np.float64)), atol=1e-6)


def test_tensor_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    arr = rng.normal(size=(3, 4, 5)).astype(np.float32)
    p = tmp_path / "a.tns"
    write_tensor(p, FeatureMap(arr))
    back = read_tensor(p)
    assert isinstance(back, FeatureMap)
    assert back.data.tobytes() == arr.tobytes()

    lm = LabelMap(rng.integers(0, 9, size=(6, 7)).astype(np.uint32))
    q = tmp_path / "b.tns"
    write_tensor(q, lm)
    back = read_tensor(q)
    assert isinstance(back, LabelMap)
    assert np.array_equal(back.labels, lm.labels)


def test_tensor_file_round_trip_fuzz(tmp_path):
    rng = np.random.default_rng(17)
    p = tmp_path / "t.tns"
    for _ in range(1000):
        ndim = int(rng.integers(1, 5))
        shape = tuple(int(rng.integers(1, 6)) for _ in range(ndim))
        if rng.random() < 0.5:
            arr = rng.normal(size=shape).astype(np.float32)
        else:
            arr = rng.integers(0, 1 << 20, size=shape).astype(np.uint32)
        write_array(p, arr)
        back = read_array(p)
        assert back.dtype == arr.dtype and back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "x.tns"
    p.write_bytes(b"XXXXXXXX" + b"\0" * 32)
    with pytest.raises(BadMagicError):
        read_array(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "x.tns"
    arr = np.ones((4, 4), dtype=np.float32)
    write_array(p, arr)
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])  # chop the tail of the payload
    with pytest.raises(TruncatedPayloadError):
        read_array(p)


def test_dtype_mismatch(tmp_path):
    p = tmp_path / "x.tns"
    write_array(p, np.ones((2, 2), dtype=np.float32))
    with pytest.raises(DtypeMismatchError):
        read_label_map(p)
    write_array(p, np.ones((2, 2, 2), dtype=np.uint32).astype(np.uint32))
    with pytest.raises(DtypeMismatchError):
        read_feature_map(p)
    with pytest.raises(DtypeMismatchError):
        write_array(p, np.ones(3, dtype=np.float64))


def test_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {
        "w1": rng.normal(size=(4, 8)).astype(np.float32),
        "b1": rng.normal(size=4).astype(np.float32),
    }
    write_bundle(tmp_path / "weights", tensors)
    back = read_bundle(tmp_path / "weights")
    assert set(back) == {"w1", "b1"}
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])
