import io
import struct

import numpy as np
import pytest

from balnorm.errors import ConvSpecError, FormatError, InvalidAxisError, ShapeMismatchError
from balnorm.tensor import (
    ConvSpec,
    as_tensor,
    conv2d_forward,
    conv2d_reference,
    l1_norm,
    load_bnt1,
    read_bnt1,
    reduce_sum,
    save_bnt1,
    write_bnt1,
)


def test_as_tensor_from_flat_data():
    x = as_tensor([1, 2, 3, 4, 5, 6], shape=(2, 3))
    assert x.dtype == np.float64
    assert x[1, 0] == 4.0


def test_as_tensor_length_mismatch():
    with pytest.raises(ShapeMismatchError):
        as_tensor([1, 2, 3], shape=(2, 2))


def test_identity_kernel_returns_input(rng):
    x = rng.normal(size=(2, 3, 5, 4))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    np.testing.assert_array_equal(conv2d_forward(x, w), x)


def test_all_ones_kernel_cyclic_sums_whole_grid():
    out = conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(out, np.full((1, 1, 3, 3), 9.0))


@pytest.mark.parametrize(
    "x_shape, w_shape, spec",
    [
        ((2, 3, 6, 5), (4, 3, 3, 3), ConvSpec(1, "cyclic")),
        ((1, 2, 8, 8), (3, 2, 3, 3), ConvSpec(2, "cyclic")),
        ((2, 2, 5, 7), (2, 2, 3, 3), ConvSpec(1, "zero")),
        ((1, 3, 7, 7), (2, 3, 5, 5), ConvSpec(2, "zero")),
    ],
)
def test_conv_matches_reference(rng, x_shape, w_shape, spec):
    x = rng.normal(size=x_shape)
    w = rng.normal(size=w_shape)
    fast = conv2d_forward(x, w, spec)
    slow = conv2d_reference(x, w, spec)
    assert fast.shape == slow.shape
    np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-12 * np.abs(slow).max())


def test_zero_padding_output_size():
    out = conv2d_forward(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)), ConvSpec(2, "zero"))
    assert out.shape == (1, 1, 3, 3)
    # corner sees a 2x2 window of ones, centre a full 3x3
    assert out[0, 0, 0, 0] == 4.0
    assert out[0, 0, 1, 1] == 9.0


def test_cyclic_stride_must_divide_input():
    with pytest.raises(ConvSpecError):
        conv2d_forward(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)), ConvSpec(2, "cyclic"))


def test_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        conv2d_forward(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_bad_stride_rejected():
    with pytest.raises(ConvSpecError):
        ConvSpec(0)


def test_cyclic_total_sum_identity(rng):
    x = rng.uniform(size=(3, 2, 6, 6))
    w = rng.normal(size=(4, 2, 3, 3))
    out = conv2d_forward(x, w).sum(axis=(0, 2, 3))
    expected = w.sum(axis=(2, 3)) @ x.sum(axis=(0, 2, 3))
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_reduce_sum_examples():
    assert reduce_sum(np.ones((2, 3)), axes=(0, 1)) == 6.0
    np.testing.assert_array_equal(reduce_sum([[1.0, 2.0], [3.0, 4.0]], axes=[0]), [4.0, 6.0])


def test_reduce_sum_matches_sequential_sum(rng):
    x = rng.normal(size=(3, 4, 5))
    expected = np.zeros(4)
    for i in range(3):
        for k in range(5):
            expected += x[i, :, k]
    np.testing.assert_allclose(reduce_sum(x, (0, 2)), expected, rtol=1e-12)


def test_reduce_sum_invalid_axis():
    with pytest.raises(InvalidAxisError):
        reduce_sum(np.ones((2, 2)), axes=[2])


def test_l1_norm():
    assert l1_norm([1.0, -2.0, 3.0]) == 6.0
    assert l1_norm(np.zeros(4)) == 0.0


def test_bnt1_file_keeps_float32_values(tmp_path, rng):
    x = rng.normal(size=(2, 3, 4)).astype(np.float32).astype(np.float64)
    save_bnt1(tmp_path / "x.bnt1", x)
    np.testing.assert_array_equal(load_bnt1(tmp_path / "x.bnt1"), x)


def test_bnt1_layout():
    stream = io.BytesIO()
    write_bnt1(stream, np.array([[1.0, 2.0]]))
    raw = stream.getvalue()
    assert raw[:4] == b"BNT1"
    assert struct.unpack("<3I", raw[4:16]) == (2, 1, 2)
    assert np.frombuffer(raw[16:], dtype="<f4").tolist() == [1.0, 2.0]


def test_bnt1_bad_magic():
    with pytest.raises(FormatError):
        read_bnt1(io.BytesIO(b"XXXX" + struct.pack("<II", 1, 1) + b"\0\0\0\0"))


def test_bnt1_truncated_payload():
    stream = io.BytesIO()
    write_bnt1(stream, np.ones(4))
    with pytest.raises(FormatError):
        read_bnt1(io.BytesIO(stream.getvalue()[:-3]))
