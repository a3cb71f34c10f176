"""Activation calibration: histograms, distance metrics and scale search.

Scale search follows entropy calibration: for every candidate clip
threshold T the clipped float distribution is compared with its
``2^(k-1) - 1``-level quantized counterpart, and the best T gives
``s = T / (2^(k-1) - 1)``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from repquant.errors import ConfigError, FormatError, RepQuantError
from repquant.quant import DEGENERATE_SCALE, QuantParams, minmax_scale, qrange, round_half_even
from repquant.tensor import check_finite, relu

CACHE_FORMAT = "repquant-calib-cache"
SMOOTH_EPS = 1e-9


class Metric(str, enum.Enum):
    MINMAX = "minmax"
    MSE = "mse"
    COSINE = "cosine"
    KL_NAIVE = "kl"
    KL_TRANSFORMED = "kl-transformed"

    @classmethod
    def parse(cls, name) -> "Metric":
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("_", "-")
        aliases = {"kl-naive": "kl"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ConfigError(f"unknown metric '{name}'; choose from {[m.value for m in cls]}") from None


@dataclass(frozen=True)
class CalibConfig:
    metric: Metric = Metric.KL_TRANSFORMED
    relu_fused: bool = True
    bins: int = 2048
    sample_count: int = 32
    # candidate thresholds are the bin edges i * bin_width, i in [min_bin, bins]
    # (min_bin defaults to 2^(k-1), i.e. 128 for 8 bits)
    min_bin: int | None = None
    smooth_eps: float = SMOOTH_EPS

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric.parse(self.metric))
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        if self.bins < 2:
            raise ConfigError("bins must be >= 2")

    def validate_bits(self, bits: int) -> None:
        qrange(bits)
        if self.metric is not Metric.MINMAX and self.bins < 2 * (1 << (bits - 1)):
            raise ConfigError(
                f"{self.bins} bins cannot resolve {bits}-bit levels; need >= {2 * (1 << (bits - 1))} "
                f"or metric=minmax"
            )

    def first_bin(self, bits: int) -> int:
        return self.min_bin if self.min_bin is not None else 1 << (bits - 1)


@dataclass
class Histogram:
    """Equal-width histogram of |A| (or of relu(A) when ReLU-fused) on [0, max]."""

    bin_count: int
    bin_width: float
    counts: np.ndarray
    total: int
    includes_negatives: bool
    max_value: float
    # exact zeros (already inside counts[0]); they quantize losslessly at any scale
    zero_count: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.bin_count,):
            raise ValueError(f"histogram: expected {self.bin_count} counts, got {self.counts.shape}")
        if int(self.counts.sum()) != self.total:
            raise ValueError("histogram: counts do not sum to total")
        if not self.bin_width > 0:
            raise ValueError("histogram: bin_width must be positive")
        if not 0 <= self.zero_count <= self.counts[0]:
            raise ValueError("histogram: zero_count exceeds the first bin")

    @property
    def degenerate(self) -> bool:
        return self.max_value <= 0 or self.total == 0

    def edges(self) -> np.ndarray:
        return np.arange(self.bin_count + 1, dtype=np.float64) * self.bin_width

    def centers(self) -> np.ndarray:
        return (np.arange(self.bin_count, dtype=np.float64) + 0.5) * self.bin_width

    def merge(self, other: "Histogram") -> "Histogram":
        if (other.bin_count, other.bin_width, other.includes_negatives) != (
                self.bin_count, self.bin_width, self.includes_negatives):
            raise ValueError("histogram: cannot merge histograms with different binning")
        return Histogram(self.bin_count, self.bin_width, self.counts + other.counts,
                         self.total + other.total, self.includes_negatives,
                         max(self.max_value, other.max_value), self.zero_count + other.zero_count)

    def to_dict(self) -> dict:
        return {"bin_count": self.bin_count, "bin_width": self.bin_width, "total": self.total,
                "includes_negatives": self.includes_negatives, "max_value": self.max_value,
                "zero_count": self.zero_count, "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping, what: str = "histogram") -> "Histogram":
        try:
            return cls(int(d["bin_count"]), float(d["bin_width"]), np.asarray(d["counts"], np.int64),
                       int(d["total"]), bool(d["includes_negatives"]), float(d["max_value"]),
                       int(d.get("zero_count", 0)))
        except KeyError as e:
            raise FormatError(f"{what}: missing field {e}") from None
        except ValueError as e:
            raise FormatError(f"{what}: {e}") from None


def _magnitudes(a, relu_fused: bool) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    check_finite(a, "activation")
    return relu(a) if relu_fused else np.abs(a)


def collect_histogram(acts: Iterable, cfg: CalibConfig) -> Histogram:
    """Two passes over ``acts``: find the max magnitude, then bin."""
    acts = list(acts)
    if not acts:
        raise ConfigError("collect_histogram: empty activation stream")
    amax = 0.0
    for a in acts:
        v = _magnitudes(a, cfg.relu_fused)
        if v.size:
            amax = max(amax, float(v.max()))
    width = amax / cfg.bins if amax > 0 else DEGENERATE_SCALE
    counts = np.zeros(cfg.bins, dtype=np.int64)
    total = zeros = 0
    for a in acts:
        v = _magnitudes(a, cfg.relu_fused).reshape(-1).astype(np.float64)
        idx = np.minimum((v / width).astype(np.int64), cfg.bins - 1)
        counts += np.bincount(idx, minlength=cfg.bins)
        total += v.size
        zeros += int(np.count_nonzero(v == 0))
    return Histogram(cfg.bins, float(width), counts, total, not cfg.relu_fused, amax, zeros)


def smooth(q: np.ndarray, eps: float = SMOOTH_EPS) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64) + eps
    return q / q.sum()


def _check_pair(p, q):
    p = np.asarray(p)
    q = np.asarray(q)
    if p.shape != q.shape or p.ndim != 1:
        raise ConfigError(f"kl_divergence: distributions must be 1-D of equal length, got {p.shape} and {q.shape}")
    return p, q


def kl_divergence(p, q, eps: float = SMOOTH_EPS) -> float:
    """KL(p || q) as sum p * (log p - log q), terms with p == 0 dropped.

    Both distributions get the same additive ``eps`` smoothing and are
    renormalized, so KL(p || p) is exactly 0. Taking the two logs separately
    keeps the result finite when bins underflow float32's normal range,
    where the ratio p / q can overflow.
    """
    p, q = _check_pair(p, q)
    p = smooth(p, eps) if eps else np.asarray(p, dtype=np.float64)
    q = smooth(q, eps) if eps else np.asarray(q, dtype=np.float64)
    nz = p > 0
    with np.errstate(divide="ignore"):
        d = np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz])))
    return float(d)


def kl_divergence_naive(p, q, eps: float = SMOOTH_EPS) -> float:
    """Reference single-precision form sum p * log(p / q), as in the classic entropy calibrator."""
    p, q = _check_pair(p, q)
    p = smooth(p, eps).astype(np.float32) if eps else np.asarray(p, dtype=np.float32)
    q = smooth(q, eps).astype(np.float32) if eps else np.asarray(q, dtype=np.float32)
    nz = p > 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        ratio = p[nz] / q[nz]
        d = np.sum(p[nz] * np.log(ratio), dtype=np.float32)
    return float(d)


def _kl_candidate(hist: np.ndarray, i: int, levels: int) -> tuple[np.ndarray, np.ndarray] | None:
    """Reference and quantized distributions for a clip at bin edge ``i``."""
    sliced = hist[:i].astype(np.float64)
    p = sliced.copy()
    p[-1] += hist[i:].sum()
    if sliced.sum() == 0:
        return None
    nonzero = p != 0
    merged = i // levels
    starts = np.arange(levels) * merged
    level_mass = np.add.reduceat(sliced, starts)
    level_nonzero = np.add.reduceat(nonzero.astype(np.float64), starts)
    level_of_bin = np.minimum(np.arange(i) // merged, levels - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_bin = np.where(level_nonzero > 0, level_mass / level_nonzero, 0.0)
    q = np.where(nonzero, per_bin[level_of_bin], 0.0)
    return p / p.sum(), q / q.sum()


def _kl_curve(h: Histogram, bits: int, cfg: CalibConfig, transformed: bool) -> tuple[np.ndarray, np.ndarray]:
    levels = qrange(bits)[1]
    kl = kl_divergence if transformed else kl_divergence_naive
    counts = h.counts.copy()
    counts[0] -= h.zero_count
    idx = np.arange(min(max(cfg.first_bin(bits), qrange(bits)[1]), h.bin_count), h.bin_count + 1)
    div = np.full(idx.shape, np.inf)
    for n, i in enumerate(idx):
        pq = _kl_candidate(counts, int(i), levels)
        if pq is not None:
            div[n] = kl(pq[0], pq[1], cfg.smooth_eps)
    div[~np.isfinite(div)] = np.inf
    return idx, div


def _reconstruction_curves(h: Histogram, bits: int, cfg: CalibConfig):
    """Histogram-weighted MSE and cosine for every candidate threshold."""
    qmax = qrange(bits)[1]
    idx = np.arange(min(max(cfg.first_bin(bits), qrange(bits)[1]), h.bin_count), h.bin_count + 1)
    keep = h.counts > 0
    c = h.centers()[keep]
    n = h.counts[keep].astype(np.float64)
    mse = np.empty(idx.shape)
    cos = np.empty(idx.shape)
    sig = np.sum(n * c * c)
    for k, i in enumerate(idx):
        s = i * h.bin_width / qmax
        r = np.minimum(round_half_even(c / s), qmax) * s
        mse[k] = np.sum(n * (c - r) ** 2) / h.total
        rr = np.sum(n * r * r)
        cos[k] = np.sum(n * c * r) / np.sqrt(sig * rr) if rr > 0 else -1.0
    return idx, mse, cos


def metric_curve(h: Histogram, bits: int, cfg: CalibConfig) -> tuple[np.ndarray, np.ndarray]:
    """(candidate thresholds, loss) for the configured metric; lower loss is better."""
    if cfg.metric in (Metric.KL_NAIVE, Metric.KL_TRANSFORMED):
        idx, loss = _kl_curve(h, bits, cfg, transformed=cfg.metric is Metric.KL_TRANSFORMED)
    elif cfg.metric in (Metric.MSE, Metric.COSINE):
        idx, mse, cos = _reconstruction_curves(h, bits, cfg)
        loss = mse if cfg.metric is Metric.MSE else 1.0 - cos
    else:
        raise ConfigError(f"metric {cfg.metric.value} has no search curve")
    return idx * h.bin_width, loss


def search_scale(h: Histogram, bits: int, cfg: CalibConfig) -> QuantParams:
    cfg.validate_bits(bits)
    qmax = qrange(bits)[1]
    if h.degenerate:
        return QuantParams(DEGENERATE_SCALE, bits)
    if cfg.metric is Metric.MINMAX:
        return minmax_scale(np.float32(h.max_value), bits)
    thresholds, loss = metric_curve(h, bits, cfg)
    if not np.any(np.isfinite(loss)):
        return minmax_scale(np.float32(h.max_value), bits)
    best = int(np.argmin(loss))
    return QuantParams(float(np.float32(thresholds[best] / qmax)), bits)


def calibrate_network(m, samples, cfg: CalibConfig, bits: int = 8,
                      histograms: dict | None = None) -> dict[int, QuantParams]:
    """Per-layer activation scales for a fused (optionally weight-quantized) model.

    ``m`` is anything with ``forward(x, capture=...)`` semantics: a
    ``RepModel`` or a ``QuantizedModel``. Filled histograms are written into
    ``histograms`` when a dict is passed.
    """
    cfg.validate_bits(bits)
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim != 4 or samples.shape[0] < 1:
        raise ConfigError("calibrate_network: need a non-empty NCHW sample batch")
    layers = range(len(m.layers))
    _, captured = run_forward(m, samples, capture=layers)
    scales = {}
    for k in layers:
        h = collect_histogram([captured[k]], cfg)
        if histograms is not None:
            histograms[k] = h
        scales[k] = search_scale(h, bits, cfg)
    return scales


def scales_from_histograms(histograms: Mapping[int, Histogram], bits: int, cfg: CalibConfig) -> dict[int, QuantParams]:
    return {k: search_scale(h, bits, cfg) for k, h in sorted(histograms.items())}


def run_forward(m, x, capture=None):
    from repquant.repnet import RepModel, forward

    if isinstance(m, RepModel):
        return forward(m, x, capture=capture)
    return m.forward(x, capture=capture)


def save_cache(path, histograms: Mapping[int, Histogram], meta: dict | None = None) -> None:
    doc = {"format": CACHE_FORMAT, "version": 1, "meta": meta or {},
           "layers": {str(k): h.to_dict() for k, h in sorted(histograms.items())}}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_cache(path) -> tuple[dict[int, Histogram], dict]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"calibration cache '{path}' not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    if doc.get("format") != CACHE_FORMAT:
        raise FormatError(f"{path}: field 'format' must be '{CACHE_FORMAT}'")
    layers = doc.get("layers")
    if not isinstance(layers, dict):
        raise FormatError(f"{path}: missing field 'layers'")
    return {int(k): Histogram.from_dict(v, f"layers[{k}]") for k, v in layers.items()}, doc.get("meta", {})
