"""Seeded desk-scale RepVGG-style models and sample sets.

BN running statistics are fitted to the branch outputs on a probe batch, as
they would be after training. That normalization alone makes the identity
and 1x1 branches dominate the fused center taps (the identity branch is
divided by the per-channel input std, a 3x3 tap by roughly sqrt(9 * C_in)
times that); ``center_dominant`` additionally draws their BN gains larger.

Inputs are class prototypes plus noise and the classifier head is a ridge
regression fit on probe features, so the float model classifies with real
margins and self-labels (float argmax) are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from repquant.errors import ConfigError
from repquant.repnet import LinearHead, RepBlock, RepModel, fuse_model, predict
from repquant.tensor import BatchNormParams, conv2d, relu

BN_EPS = 1e-5


@dataclass
class ArchSpec:
    widths: tuple = (16, 16, 32, 32, 32, 64, 64)
    strides: tuple = (2, 1, 2, 1, 1, 2, 1)
    input_dims: tuple = (3, 32, 32)
    num_classes: int = 10
    center_dominant: bool = True
    # per-branch BN shift; negative values give pre-ReLU outputs a long negative tail
    beta_range: tuple = (-1.0, 0.0)
    # fraction of channels whose identity / 1x1 BN gain is negated
    flip_frac: float = 0.0
    noise: float = 0.15
    # sparse class-independent impulses: per-pixel probability and amplitude
    impulse_prob: float = 0.0015
    impulse_amp: float = 7.0
    probe_count: int = 256

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.beta_range = tuple(float(b) for b in self.beta_range)
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ConfigError("arch: widths and strides must be non-empty and of equal length")
        if any(w < 1 for w in self.widths) or any(s not in (1, 2) for s in self.strides):
            raise ConfigError("arch: widths must be positive and strides 1 or 2")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ConfigError(f"arch: input_dims must be (C, H, W), got {self.input_dims}")
        if self.num_classes < 2:
            raise ConfigError("arch: need at least 2 classes")
        if len(self.beta_range) != 2 or self.beta_range[0] > self.beta_range[1]:
            raise ConfigError("arch: beta_range must be (low, high)")
        if self.probe_count < 2:
            raise ConfigError("arch: probe_count must be >= 2")

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "strides": list(self.strides),
                "input_dims": list(self.input_dims), "num_classes": self.num_classes,
                "center_dominant": self.center_dominant, "beta_range": list(self.beta_range), "flip_frac": self.flip_frac,
                "noise": self.noise, "impulse_prob": self.impulse_prob,
                "impulse_amp": self.impulse_amp, "probe_count": self.probe_count}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"arch: unknown fields {sorted(unknown)}")
        return cls(**d)


def class_prototypes(seed: int, num_classes: int, input_dims) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 0x5EED])
    return rng.standard_normal((num_classes, *input_dims)).astype(np.float32)


def make_inputs(rng: np.random.Generator, n: int, prototypes: np.ndarray, noise: float = 1.0,
                impulse_prob: float = 0.0, impulse_amp: float = 8.0):
    """``n`` samples ``prototype[y] + noise * N(0, 1)`` plus optional sparse impulses; returns (x, y)."""
    y = rng.integers(0, prototypes.shape[0], size=n)
    shape = (n, *prototypes.shape[1:])
    x = prototypes[y] + noise * rng.standard_normal(shape)
    if impulse_prob > 0:
        hit = rng.random(shape) < impulse_prob
        x = x + hit * rng.choice([-1.0, 1.0], size=shape) * impulse_amp * rng.uniform(0.5, 1.0, size=shape)
    return x.astype(np.float32), y.astype(np.int32)


def _bn(rng, c: int, gains, betas, y: np.ndarray | None, flip_frac: float = 0.0) -> BatchNormParams:
    """BN params; running stats are the batch statistics of ``y`` when given."""
    gamma = rng.uniform(*gains, size=c)
    if flip_frac > 0:
        gamma = np.where(rng.random(c) < flip_frac, -gamma, gamma)
    beta = rng.uniform(*betas, size=c)
    if y is not None:
        y64 = y.astype(np.float64)
        mean, var = y64.mean(axis=(0, 2, 3)), y64.var(axis=(0, 2, 3))
    else:
        mean, var = rng.normal(0.0, 0.1, size=c), rng.uniform(0.5, 1.5, size=c)
    return BatchNormParams(gamma.astype(np.float32), beta.astype(np.float32),
                           mean.astype(np.float32), var.astype(np.float32), BN_EPS)


def random_repblock(rng: np.random.Generator, c_in: int, c_out: int, stride: int = 1,
                    probe: np.ndarray | None = None, center_dominant: bool = True,
                    with_1x1: bool = True, with_identity: bool | None = None,
                    beta_range=(-1.0, 0.0), flip_frac: float = 0.0) -> RepBlock:
    """One rep-block; BN stats are fitted to ``probe`` if given, else drawn at random."""
    if with_identity is None:
        with_identity = c_in == c_out and stride == 1
    w3 = (rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in))).astype(np.float32)
    w1 = (rng.standard_normal((c_out, c_in, 1, 1)) * np.sqrt(2.0 / c_in)).astype(np.float32) if with_1x1 else None
    big = (1.0, 2.5) if center_dominant else (0.3, 1.0)
    small = (0.3, 1.0)

    def fit(x, w, pad):
        return None if probe is None else conv2d(x, w, None, stride, pad)

    bn3 = _bn(rng, c_out, small, beta_range, fit(probe, w3, 1))
    bn1 = _bn(rng, c_out, big, beta_range, fit(probe, w1, 0), flip_frac) if w1 is not None else None
    bnid = _bn(rng, c_out, big, beta_range, probe, flip_frac) if with_identity else None
    return RepBlock(w3, bn3, w1, bn1, bnid, stride=stride, relu=True)


def _fit_head(feats: np.ndarray, y: np.ndarray, num_classes: int, ridge: float = 1e-2) -> LinearHead:
    f = feats.astype(np.float64)
    mu, sd = f.mean(axis=0), f.std(axis=0) + 1e-6
    z = (f - mu) / sd
    target = np.eye(num_classes)[y] * 2.0 - 1.0
    a = z.T @ z + ridge * len(z) * np.eye(z.shape[1])
    coef = np.linalg.solve(a, z.T @ (target - target.mean(axis=0)))  # (C, classes)
    w = (coef / sd[:, None]).T
    b = target.mean(axis=0) - w @ mu
    return LinearHead(w.astype(np.float32), b.astype(np.float32))


def build_repvgg(seed: int = 0, arch: ArchSpec | None = None) -> RepModel:
    """Deterministic multi-branch model for ``seed``."""
    arch = arch or ArchSpec()
    rng = np.random.default_rng(seed)
    protos = class_prototypes(seed, arch.num_classes, arch.input_dims)
    x, y = make_inputs(rng, arch.probe_count, protos, arch.noise, arch.impulse_prob, arch.impulse_amp)
    layers = []
    c_in = arch.input_dims[0]
    for width, stride in zip(arch.widths, arch.strides):
        block = random_repblock(rng, c_in, width, stride, probe=x, center_dominant=arch.center_dominant,
                                beta_range=arch.beta_range, flip_frac=arch.flip_frac)
        layers.append(block)
        x = relu(block(x))
        c_in = width
    head = _fit_head(x.astype(np.float64).mean(axis=(2, 3)), y, arch.num_classes)
    meta = {"generator": "repvgg", "seed": int(seed), "arch": arch.to_dict()}
    return RepModel(tuple(layers), head, arch.input_dims, arch.num_classes, meta)


@dataclass
class SyntheticSet:
    calib: np.ndarray
    eval_x: np.ndarray
    eval_labels: np.ndarray
    meta: dict = field(default_factory=dict)


def make_sample_sets(model: RepModel, seed: int, calib_count: int = 32, eval_count: int = 256) -> SyntheticSet:
    """Calibration batch plus an eval batch self-labeled by the float model's argmax.

    Needs the generator metadata of a model built by :func:`build_repvgg`.
    """
    if calib_count < 1 or eval_count < 1:
        raise ConfigError("sample counts must be positive")
    gen = model.meta or {}
    if "seed" not in gen or "arch" not in gen:
        raise ConfigError("model has no generator metadata; cannot synthesize matching samples")
    arch = ArchSpec.from_dict(gen["arch"])
    protos = class_prototypes(gen["seed"], model.num_classes, model.input_dims)
    calib_seq, eval_seq = np.random.SeedSequence(seed).spawn(2)
    noise = (arch.noise, arch.impulse_prob, arch.impulse_amp)
    calib, _ = make_inputs(np.random.default_rng(calib_seq), calib_count, protos, *noise)
    eval_x, _ = make_inputs(np.random.default_rng(eval_seq), eval_count, protos, *noise)
    fused = model if model.is_fused else fuse_model(model)
    labels = np.argmax(predict(fused, eval_x), axis=1).astype(np.int32)
    return SyntheticSet(calib, eval_x, labels, {"seed": int(seed), "calib_count": calib_count,
                                                 "eval_count": eval_count})


def bundled_model() -> RepModel:
    """The fixed-seed center-dominant reference model used by the acceptance suite."""
    return build_repvgg(seed=0, arch=ArchSpec(center_dominant=True))


def center_contains_surround(w: np.ndarray) -> bool:
    """True if the [1,1] taps' value range contains the range of the other eight taps."""
    w = np.asarray(w)
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ConfigError(f"expected an O x I x 3 x 3 kernel, got {w.shape}")
    center = w[:, :, 1, 1]
    surround = np.delete(w.reshape(*w.shape[:2], 9), 4, axis=2)
    return bool(center.min() <= surround.min() and center.max() >= surround.max())
