"""Dense float32 tensor numerics: conv2d, batch-norm folding, ReLU.

Tensors are plain ``numpy.ndarray`` objects of dtype float32. Activations are
NCHW, weights OIHW. All accumulation happens in float64 and is rounded once
to float32 at the end, which keeps results reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from repquant.errors import NumericError, ShapeError

# im2col buffers are chunked over the batch to bound memory
_CONV_CHUNK_ELEMS = 1 << 22


def as_tensor(x, ndim: int = 4, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim}-D array, got shape {arr.shape}")
    return arr


def check_finite(x: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name}: contains NaN or Inf")


def as_vector(v, length: int, name: str) -> np.ndarray:
    if v is None:
        return np.zeros(length, dtype=np.float32)
    arr = np.asarray(v, dtype=np.float32).reshape(-1)
    if arr.shape[0] != length:
        raise ShapeError(f"{name}: expected length {length}, got {arr.shape[0]}")
    return arr


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        n = np.asarray(self.gamma).reshape(-1).shape[0]
        for field in ("gamma", "beta", "running_mean", "running_var"):
            object.__setattr__(self, field, as_vector(getattr(self, field), n, f"bn.{field}"))
        if np.any(self.running_var < 0):
            raise ValueError("bn.running_var must be non-negative")
        if not self.eps >= 0:
            raise ValueError("bn.eps must be non-negative")
        object.__setattr__(self, "eps", float(np.float32(self.eps)))

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])

    @classmethod
    def identity(cls, channels: int, eps: float = 0.0) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, np.float32),
            beta=np.zeros(channels, np.float32),
            running_mean=np.zeros(channels, np.float32),
            running_var=np.ones(channels, np.float32),
            eps=eps,
        )

    def scale64(self) -> np.ndarray:
        """Per-channel multiplier gamma / sqrt(var + eps), in float64."""
        var = self.running_var.astype(np.float64) + np.float64(self.eps)
        return self.gamma.astype(np.float64) / np.sqrt(var)

    def apply(self, y: np.ndarray) -> np.ndarray:
        """Inference-mode batch norm on an NCHW activation."""
        y = as_tensor(y, name="bn input")
        if y.shape[1] != self.channels:
            raise ShapeError(f"bn: {self.channels} channels, input has {y.shape[1]}")
        scale = self.scale64()[None, :, None, None]
        mean = self.running_mean.astype(np.float64)[None, :, None, None]
        beta = self.beta.astype(np.float64)[None, :, None, None]
        return ((y.astype(np.float64) - mean) * scale + beta).astype(np.float32)


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return ho, wo


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """2-D cross-correlation with zero padding.

    The reduction axis of the im2col matrix is laid out input-channel-major,
    then kernel row, then kernel column. Accumulates in float64.
    """
    x = as_tensor(x, name="conv input")
    w = as_tensor(w, name="conv weight")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {i}")
    ho, wo = conv_output_hw(h, wd, kh, kw, stride, pad)
    if ho <= 0 or wo <= 0 or h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d: non-positive output extent for input {x.shape}, kernel {w.shape}")
    b = as_vector(bias, o, "conv bias").astype(np.float64)

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    wmat = w.reshape(o, i * kh * kw).astype(np.float64).T
    out = np.empty((n, o, ho, wo), dtype=np.float32)
    per_sample = max(1, ho * wo * i * kh * kw)
    chunk = max(1, _CONV_CHUNK_ELEMS // per_sample)
    for start in range(0, n, chunk):
        xs = xp[start:start + chunk]
        win = np.lib.stride_tricks.sliding_window_view(xs, (kh, kw), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        # (n, c, ho, wo, kh, kw) -> (n, ho, wo, c, kh, kw)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, i * kh * kw).astype(np.float64)
        acc = cols @ wmat + b
        with np.errstate(over="ignore"):  # overflow is reported by the finiteness check below
            out[start:start + chunk] = acc.reshape(xs.shape[0], ho, wo, o).transpose(0, 3, 1, 2)
    check_finite(out, "conv2d output")
    return out


def fold_bn64(w, bias, bn: BatchNormParams) -> tuple[np.ndarray, np.ndarray]:
    """Float64 variant of :func:`fold_bn`, used when several folded branches are summed."""
    w = as_tensor(w, name="fold_bn weight")
    if bn.channels != w.shape[0]:
        raise ShapeError(f"fold_bn: bn has {bn.channels} channels, weight has {w.shape[0]} outputs")
    b = as_vector(bias, w.shape[0], "fold_bn bias").astype(np.float64)
    scale = bn.scale64()
    w64 = w.astype(np.float64) * scale[:, None, None, None]
    b64 = (b - bn.running_mean.astype(np.float64)) * scale + bn.beta.astype(np.float64)
    return w64, b64


def fold_bn(w, bias, bn: BatchNormParams) -> tuple[np.ndarray, np.ndarray]:
    """Fold inference batch norm into the preceding conv's weight and bias."""
    w64, b64 = fold_bn64(w, bias, bn)
    return w64.astype(np.float32), b64.astype(np.float32)


def relu(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return np.maximum(x, np.float32(0.0))


def linear(x, w, bias=None) -> np.ndarray:
    """Fully connected layer, ``x`` is (N, in), ``w`` is (out, in)."""
    x = as_tensor(x, ndim=2, name="linear input")
    w = as_tensor(w, ndim=2, name="linear weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[1]} != weight width {w.shape[1]}")
    b = as_vector(bias, w.shape[0], "linear bias").astype(np.float64)
    return (x.astype(np.float64) @ w.astype(np.float64).T + b).astype(np.float32)


def global_avg_pool(x) -> np.ndarray:
    x = as_tensor(x, name="pool input")
    return x.astype(np.float64).mean(axis=(2, 3)).astype(np.float32)
