import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from renetseg.tensor import (
    CheckpointError,
    ShapeError,
    concat_channels,
    create,
    inverse_permutation,
    load_tensor,
    matmul,
    permute,
    read_tensor,
    save_tensor,
    write_tensor,
)


def test_create_zero_fill():
    t = create([2, 3], 0)
    assert t.shape == (2, 3) and t.size == 6 and not t.any()


def test_create_sum_is_product_of_extents():
    assert create([21, 30, 40], 1).sum() == 25200


@pytest.mark.parametrize("shape", [[0, 3], [2, -1]])
def test_create_rejects_degenerate_extent(shape):
    with pytest.raises(ShapeError):
        create(shape, 1)


def test_matmul_identity():
    b = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(matmul(np.eye(2), b), b)


def test_matmul_hand_example():
    np.testing.assert_array_equal(matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0], [6]])), [[17], [39]])


def test_matmul_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
        ref = np.array([[sum(a[i, k] * b[k, j] for k in range(8)) for j in range(8)] for i in range(8)])
        np.testing.assert_allclose(matmul(a, b), ref, rtol=1e-12, atol=1e-13)


def test_concat_channel_counts():
    maps = [np.zeros((512, 2, 2)), np.zeros((512, 2, 2)), np.zeros((1024, 2, 2))]
    assert concat_channels(maps).shape == (2048, 2, 2)


def test_concat_single_is_identity():
    x = np.random.default_rng(1).random((3, 4, 5))
    np.testing.assert_array_equal(concat_channels([x]), x)


def test_concat_constant_maps():
    out = concat_channels([np.full((1, 2, 2), 2.0), np.full((1, 2, 2), 5.0)])
    assert (out[0] == 2).all() and (out[1] == 5).all()


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels([np.zeros((1, 2, 2)), np.zeros((1, 3, 2))])


def test_permute_transpose_and_invalid_order():
    m = np.arange(6).reshape(2, 3)
    t = permute(m, (1, 0))
    assert t.shape == (3, 2) and t[2, 1] == m[1, 2]
    with pytest.raises(ValueError):
        permute(np.zeros((2, 2, 2)), (0, 0, 1))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=4),
                  elements=st.floats(-1e3, 1e3)), st.randoms(use_true_random=False))
def test_permute_roundtrip_preserves_elements(x, rnd):
    order = list(range(x.ndim))
    rnd.shuffle(order)
    y = permute(x, order)
    np.testing.assert_array_equal(permute(y, inverse_permutation(order)), x)
    np.testing.assert_array_equal(np.sort(y, axis=None), np.sort(x, axis=None))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_record_roundtrip(dtype, tmp_path):
    x = np.random.default_rng(2).standard_normal((2, 3, 4)).astype(dtype)
    save_tensor(tmp_path / "t.rnseg", x)
    y = load_tensor(tmp_path / "t.rnseg")
    assert y.dtype == dtype
    np.testing.assert_array_equal(x, y)


def test_tensor_record_layout():
    buf = io.BytesIO()
    write_tensor(buf, np.array([[1.0, 2.0]], dtype=np.float32))
    raw = buf.getvalue()
    assert raw[:6] == b"RNSEG1"
    assert raw[6:10] == (2).to_bytes(4, "little")
    assert raw[10:18] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert raw[18] == 4
    assert np.frombuffer(raw[19:], "<f4").tolist() == [1.0, 2.0]


def test_tensor_record_errors():
    buf = io.BytesIO()
    write_tensor(buf, np.zeros((4, 4)))
    raw = buf.getvalue()
    with pytest.raises(CheckpointError, match="byte"):
        read_tensor(io.BytesIO(raw[:-5]))
    with pytest.raises(CheckpointError, match="magic"):
        read_tensor(io.BytesIO(b"XXXXXX" + raw[6:]))
