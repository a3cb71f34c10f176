"""Shared harnesses for the experiment scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from repquant.analysis import Fidelity, fidelity_report
from repquant.calib import CalibConfig, Metric, calibrate_network, collect_histogram, search_scale
from repquant.qmodel import quantize_weights
from repquant.quant import fake_quant
from repquant.repnet import fuse_model
from repquant.zoo import ArchSpec, SyntheticSet, build_repvgg, make_sample_sets


@dataclass(frozen=True)
class Arm:
    name: str
    scheme: str
    metric: Metric
    relu_fused: bool


# naive baseline, each proposed component alone, and both together
ABLATION_ARMS = (
    Arm("baseline", "minmax", Metric.KL_NAIVE, False),
    Arm("kl_relu", "minmax", Metric.KL_TRANSFORMED, True),
    Arm("cfws", "cfws", Metric.KL_NAIVE, False),
    Arm("both", "cfws", Metric.KL_TRANSFORMED, True),
)


def synthetic_trial(seed: int, arch: ArchSpec | None = None, calib_count: int = 32,
                    eval_count: int = 256) -> tuple:
    """(multi-branch model, fused model, sample sets) for ``seed``."""
    m = build_repvgg(seed, arch)
    return m, fuse_model(m), make_sample_sets(m, seed, calib_count, eval_count)


def run_arm(fused, sets: SyntheticSet, scheme: str, metric, relu_fused: bool, bits: int = 8,
            bins: int = 2048) -> Fidelity:
    q = quantize_weights(fused, scheme, bits)
    cfg = CalibConfig(metric=Metric.parse(metric), relu_fused=relu_fused, bins=bins)
    q = q.with_activation_scales(calibrate_network(q, sets.calib, cfg, bits), relu_fused)
    return fidelity_report(fused, q, sets.eval_x, sets.eval_labels)


def ablation(seed: int, arch: ArchSpec | None = None, bits: int = 8) -> dict[str, Fidelity]:
    _, fused, sets = synthetic_trial(seed, arch)
    return {a.name: run_arm(fused, sets, a.scheme, a.metric, a.relu_fused, bits) for a in ABLATION_ARMS}


def ablation_ordering(cos: dict[str, float]) -> bool:
    """Each component alone beats the baseline and both together match or beat each alone."""
    b, i, ii, both = cos["baseline"], cos["kl_relu"], cos["cfws"], cos["both"]
    return i >= b and ii >= b and both >= i and both >= ii


def heavy_tailed_activations(seed: int, n: int = 1 << 20, outliers: int = 2,
                             outlier_range=(200.0, 300.0)) -> np.ndarray:
    """Standard normal bulk with a few huge outliers, as in long-tailed conv outputs."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(n)
    idx = rng.choice(n, outliers, replace=False)
    a[idx] = rng.uniform(*outlier_range, size=outliers)
    return a.astype(np.float32)


def metric_scales(acts: np.ndarray, bits: int = 8, relu_fused: bool = False,
                  metrics=tuple(Metric)) -> dict[str, dict]:
    """Scale chosen by each metric and the reconstruction MSE it gives on ``acts``."""
    values = np.maximum(acts, 0) if relu_fused else acts
    out = {}
    for metric in metrics:
        cfg = CalibConfig(metric=Metric.parse(metric), relu_fused=relu_fused)
        p = search_scale(collect_histogram([acts], cfg), bits, cfg)
        err = values.astype(np.float64) - fake_quant(values, p)
        out[cfg.metric.value] = {"scale": float(p.scale), "mse": float(np.mean(err * err))}
    return out
