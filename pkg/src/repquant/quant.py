"""Symmetric uniform quantization and Coarse & Fine Weight Splitting (CFWS).

A 3x3 kernel produced by fusing a rep-block carries the identity and 1x1
contributions only at its center tap, so the centers span a much wider range
than the eight surrounding taps. CFWS quantizes the centers with a coarse
scale, folds the rounding residual back into the center slots and quantizes
that union together with the surround using a fine scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from repquant.errors import ConfigError, NumericError, ShapeError
from repquant.tensor import as_tensor, as_vector, check_finite, conv2d

# smallest positive normal float32, used as the scale of all-zero tensors
DEGENERATE_SCALE = float(np.finfo(np.float32).tiny)


def round_half_even(x: np.ndarray) -> np.ndarray:
    """Rounding used by every quantizer in the package."""
    return np.rint(x)


def qrange(bits: int) -> tuple[int, int]:
    if bits < 2:
        raise ConfigError(f"bit-width must be >= 2, got {bits}")
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def code_dtype(bits: int):
    if bits <= 8:
        return np.int8
    if bits <= 16:
        return np.int16
    return np.int32


@dataclass(frozen=True)
class QuantParams:
    scale: float | np.ndarray
    bits: int = 8

    def __post_init__(self):
        qrange(self.bits)
        s = np.asarray(self.scale, dtype=np.float32)
        if not (np.all(np.isfinite(s)) and np.all(s > 0)):
            raise NumericError(f"scale must be positive and finite, got {self.scale!r}")
        object.__setattr__(self, "scale", float(s) if s.ndim == 0 else s)

    @property
    def qmax(self) -> int:
        return qrange(self.bits)[1]


def _scale_array(p: QuantParams, ndim: int) -> np.ndarray:
    s = np.asarray(p.scale, dtype=np.float64)
    if s.ndim == 1:  # per-output-channel
        s = s.reshape((-1,) + (1,) * (ndim - 1))
    return s


def quantize(x, p: QuantParams) -> np.ndarray:
    """clip(round(x / s), -2^(k-1), 2^(k-1)-1) as integer codes."""
    x = np.asarray(x, dtype=np.float32)
    check_finite(x, "quantize input")
    lo, hi = qrange(p.bits)
    # float64 quotient of two float32 values never lands falsely on a .5 tie
    q = round_half_even(x.astype(np.float64) / _scale_array(p, x.ndim))
    return np.clip(q, lo, hi).astype(code_dtype(p.bits))


def dequantize(q, p: QuantParams) -> np.ndarray:
    q = np.asarray(q)
    return (q.astype(np.float64) * _scale_array(p, q.ndim)).astype(np.float32)


def fake_quant(x, p: QuantParams) -> np.ndarray:
    return dequantize(quantize(x, p), p)


def minmax_scale(x, bits: int, per_channel: bool = False) -> QuantParams:
    """s = max|x| / (2^(k-1) - 1); all-zero input gets ``DEGENERATE_SCALE``.

    With ``per_channel`` the max is taken per leading (output-channel) slice.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.size == 0:
        raise ConfigError("minmax_scale: empty tensor")
    check_finite(x, "minmax_scale input")
    qmax = qrange(bits)[1]
    if per_channel:
        amax = np.abs(x.reshape(x.shape[0], -1)).max(axis=1).astype(np.float64)
    else:
        amax = np.float64(np.abs(x).max())
    s = (amax / qmax).astype(np.float32)
    s = np.where(s > 0, s, np.float32(DEGENERATE_SCALE)).astype(np.float32)
    return QuantParams(s if per_channel else float(s), bits)


@dataclass(frozen=True)
class MinMaxWeights:
    """Single-scale integer kernel, the baseline weight scheme."""

    codes: np.ndarray
    params: QuantParams

    scheme = "minmax"

    @property
    def bits(self) -> int:
        return self.params.bits

    def dequantize(self) -> np.ndarray:
        return dequantize(self.codes, self.params)


def minmax_quantize(w, bits: int, per_channel: bool = False) -> MinMaxWeights:
    w = np.asarray(w, dtype=np.float32)
    p = minmax_scale(w, bits, per_channel)
    return MinMaxWeights(quantize(w, p), p)


@dataclass(frozen=True)
class CFWSWeights:
    coarse: np.ndarray  # (O, I, 1, 1) integer codes of the center taps
    fine: np.ndarray  # (O, I, 3, 3) codes of surround + center residual
    s_coarse: float | np.ndarray
    s_fine: float | np.ndarray
    bits: int

    scheme = "cfws"

    def __post_init__(self):
        lo, hi = qrange(self.bits)
        for name in ("coarse", "fine"):
            codes = getattr(self, name)
            if codes.size and (codes.min() < lo or codes.max() > hi):
                raise NumericError(f"cfws {name} codes outside [{lo}, {hi}]")

    @property
    def coarse_params(self) -> QuantParams:
        return QuantParams(self.s_coarse, self.bits)

    @property
    def fine_params(self) -> QuantParams:
        return QuantParams(self.s_fine, self.bits)

    def dequantize(self) -> np.ndarray:
        return cfws_dequantize(self)


def _check_3x3(w: np.ndarray, op: str) -> None:
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"{op}: expected an O x I x 3 x 3 kernel, got shape {w.shape}")


def cfws_split(w) -> tuple[np.ndarray, np.ndarray]:
    """Split a 3x3 kernel into its centers (O, I, 1, 1) and the surround with zeroed centers."""
    w = np.asarray(w, dtype=np.float32)
    _check_3x3(w, "cfws_split")
    center = w[:, :, 1:2, 1:2].copy()
    surround = w.copy()
    surround[:, :, 1, 1] = 0.0
    return center, surround


def cfws_quantize(w, bits: int = 8, per_channel: bool = False) -> CFWSWeights:
    w = as_tensor(w, name="cfws weight")
    _check_3x3(w, "cfws_quantize")
    check_finite(w, "cfws weight")
    center, surround = cfws_split(w)

    p_coarse = minmax_scale(center, bits, per_channel)
    coarse = quantize(center, p_coarse)
    residual = center - dequantize(coarse, p_coarse)

    union = surround
    union[:, :, 1, 1] = residual[:, :, 0, 0]
    p_fine = minmax_scale(union, bits, per_channel)
    fine = quantize(union, p_fine)
    return CFWSWeights(coarse, fine, p_coarse.scale, p_fine.scale, bits)


def cfws_dequantize(c: CFWSWeights) -> np.ndarray:
    w = dequantize(c.fine, c.fine_params)
    center = dequantize(c.coarse, c.coarse_params)
    w[:, :, 1, 1] += center[:, :, 0, 0]
    return w


def cfws_conv(x, c: CFWSWeights, bias=None, stride: int = 1) -> np.ndarray:
    """Dual-path execution: fine 3x3 conv plus coarse 1x1 conv at the center alignment."""
    fine = dequantize(c.fine, c.fine_params)
    coarse = dequantize(c.coarse, c.coarse_params)
    b = as_vector(bias, fine.shape[0], "cfws bias")
    y_fine = conv2d(x, fine, b, stride=stride, pad=1)
    y_coarse = conv2d(x, coarse, None, stride=stride, pad=0)
    return (y_fine.astype(np.float64) + y_coarse).astype(np.float32)


def reconstruction_mse(w, w_hat) -> float:
    d = np.asarray(w, np.float64) - np.asarray(w_hat, np.float64)
    return float(np.mean(d * d))
