import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from repquant.errors import NumericError, ShapeError
from repquant.tensor import (
    BatchNormParams,
    conv2d,
    conv_output_hw,
    fold_bn,
    global_avg_pool,
    linear,
    relu,
)


def naive_conv(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation in float64."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[ni, :, y * stride:y * stride + kh, z * stride:z * stride + kw]
                    out[ni, oi, y, z] = np.sum(patch * w[oi]) + (b[oi] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 0, 3), (3, 2, 3)])
def test_conv_matches_loop_oracle(rng, stride, pad, k):
    x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = conv2d(x, w, b, stride, pad)
    ref = naive_conv(x, w, b, stride, pad)
    assert got.dtype == np.float32
    assert got.shape == ref.shape
    np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-6)


def test_conv_chunking_is_invisible(rng, monkeypatch):
    import repquant.tensor as t

    x = rng.standard_normal((5, 2, 6, 6)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    whole = conv2d(x, w, None, 1, 1)
    monkeypatch.setattr(t, "_CONV_CHUNK_ELEMS", 1)
    assert np.array_equal(conv2d(x, w, None, 1, 1), whole)


def test_conv_delta_kernel_is_identity(rng):
    x = rng.standard_normal((1, 3, 5, 5)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3), np.float32)
    w[np.arange(3), np.arange(3), 1, 1] = 1.0
    assert np.array_equal(conv2d(x, w, None, 1, 1), x)


@pytest.mark.parametrize("xs,ws,stride,pad", [
    ((1, 3, 5, 5), (2, 4, 3, 3), 1, 1),  # channel mismatch
    ((1, 3, 2, 2), (2, 3, 3, 3), 1, 0),  # kernel larger than input
    ((1, 3, 5, 5), (2, 3, 3, 3), 0, 1),  # bad stride
    ((3, 5, 5), (2, 3, 3, 3), 1, 1),  # not NCHW
])
def test_conv_shape_errors(xs, ws, stride, pad):
    with pytest.raises(ShapeError):
        conv2d(np.zeros(xs), np.zeros(ws), None, stride, pad)


def test_conv_rejects_overflow():
    x = np.full((1, 1, 3, 3), 3e38, np.float32)
    with pytest.raises(NumericError):
        conv2d(x, np.ones((1, 1, 3, 3), np.float32), None, 1, 1)


def test_output_extent():
    assert conv_output_hw(56, 56, 3, 3, 1, 1) == (56, 56)
    assert conv_output_hw(56, 56, 3, 3, 2, 1) == (28, 28)
    assert conv_output_hw(7, 7, 1, 1, 2, 0) == (4, 4)


def test_bn_identity_is_noop(rng):
    y = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
    assert np.array_equal(BatchNormParams.identity(4).apply(y), y)


def test_bn_validation():
    with pytest.raises(ValueError):
        BatchNormParams(np.ones(2), np.zeros(2), np.zeros(2), -np.ones(2))
    with pytest.raises(ShapeError):
        BatchNormParams(np.ones(2), np.zeros(3), np.zeros(2), np.ones(2))


@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 1e-5, 1e-3]))
def test_fold_bn_equals_conv_then_bn(seed, eps):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    bn = BatchNormParams(rng.uniform(0.2, 2, 4), rng.normal(size=4), rng.normal(size=4),
                         rng.uniform(0.1, 2, 4), eps)
    wf, bf = fold_bn(w, None, bn)
    ref = bn.apply(conv2d(x, w, None, 1, 1))
    np.testing.assert_allclose(conv2d(x, wf, bf, 1, 1), ref, rtol=1e-5, atol=1e-5)


def test_relu_linear_pool():
    x = np.array([[-1.0, 0.0, 2.0]], np.float32)
    assert relu(x).tolist() == [[0.0, 0.0, 2.0]]
    w = np.array([[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]], np.float32)
    assert linear(x, w, [1.0, 0.0]).tolist() == [[6.0, 1.0]]
    with pytest.raises(ShapeError):
        linear(x, w.T)
    t = np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2)
    assert global_avg_pool(t).tolist() == [[1.5, 5.5]]
