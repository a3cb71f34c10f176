"""Re-parameterized network graph: rep-blocks, fusion, forward pass."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Iterable, Union

import numpy as np

from repquant.errors import ShapeError, StructuralError
from repquant.tensor import (
    BatchNormParams,
    as_tensor,
    as_vector,
    conv2d,
    conv_output_hw,
    fold_bn64,
    global_avg_pool,
    linear,
    relu,
)


@dataclass(frozen=True)
class RepBlock:
    """Training-time block: 3x3 conv+BN, optional 1x1 conv+BN, optional identity BN."""

    w3x3: np.ndarray
    bn3x3: BatchNormParams
    w1x1: np.ndarray | None = None
    bn1x1: BatchNormParams | None = None
    bn_id: BatchNormParams | None = None
    stride: int = 1
    relu: bool = True

    def __post_init__(self):
        object.__setattr__(self, "w3x3", as_tensor(self.w3x3, name="branch3x3 weight"))
        o, i, kh, kw = self.w3x3.shape
        if (kh, kw) != (3, 3):
            raise StructuralError(f"branch3x3 kernel must be 3x3, got {kh}x{kw}")
        if self.bn3x3.channels != o:
            raise StructuralError("branch3x3 BN channel count != output channels")
        if (self.w1x1 is None) != (self.bn1x1 is None):
            raise StructuralError("branch1x1 needs both a weight and BN params")
        if self.w1x1 is not None:
            object.__setattr__(self, "w1x1", as_tensor(self.w1x1, name="branch1x1 weight"))
            if self.w1x1.shape != (o, i, 1, 1):
                raise StructuralError(f"branch1x1 weight must be {(o, i, 1, 1)}, got {self.w1x1.shape}")
            if self.bn1x1.channels != o:
                raise StructuralError("branch1x1 BN channel count != output channels")
        if self.bn_id is not None:
            if o != i or self.stride != 1:
                raise StructuralError("identity branch requires O == I and stride 1")
            if self.bn_id.channels != o:
                raise StructuralError("identity BN channel count != output channels")
        if self.stride < 1:
            raise StructuralError(f"stride must be positive, got {self.stride}")

    @property
    def out_channels(self) -> int:
        return self.w3x3.shape[0]

    @property
    def in_channels(self) -> int:
        return self.w3x3.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Multi-branch output (before the trailing ReLU)."""
        y = self.bn3x3.apply(conv2d(x, self.w3x3, None, self.stride, pad=1)).astype(np.float64)
        if self.w1x1 is not None:
            y += self.bn1x1.apply(conv2d(x, self.w1x1, None, self.stride, pad=0))
        if self.bn_id is not None:
            y += self.bn_id.apply(x)
        return y.astype(np.float32)


@dataclass(frozen=True)
class FusedConv:
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    relu: bool = True

    def __post_init__(self):
        object.__setattr__(self, "weight", as_tensor(self.weight, name="fused weight"))
        if self.weight.shape[2:] != (3, 3):
            raise StructuralError(f"fused weight must be 3x3, got {self.weight.shape}")
        object.__setattr__(self, "bias", as_vector(self.bias, self.weight.shape[0], "fused bias"))

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return conv2d(x, self.weight, self.bias, self.stride, pad=1)


Layer = Union[RepBlock, FusedConv]


@dataclass(frozen=True)
class LinearHead:
    """Global average pool followed by a linear classifier."""

    weight: np.ndarray  # (classes, channels)
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", as_tensor(self.weight, ndim=2, name="head weight"))
        object.__setattr__(self, "bias", as_vector(self.bias, self.weight.shape[0], "head bias"))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return linear(global_avg_pool(x), self.weight, self.bias)


@dataclass(frozen=True)
class RepModel:
    layers: tuple
    head: LinearHead
    input_dims: tuple  # (C, H, W)
    num_classes: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        channels = self.input_dims[0]
        for k, layer in enumerate(self.layers):
            if layer.in_channels != channels:
                raise StructuralError(
                    f"layer {k}: expects {layer.in_channels} input channels, previous layer gives {channels}"
                )
            channels = layer.out_channels
        if self.head.weight.shape != (self.num_classes, channels):
            raise StructuralError(
                f"head weight must be {(self.num_classes, channels)}, got {self.head.weight.shape}"
            )

    @property
    def is_fused(self) -> bool:
        return all(isinstance(layer, FusedConv) for layer in self.layers)

    def layer_shapes(self) -> list[tuple[tuple, tuple]]:
        """Per-layer ((C_in, H_in, W_in), (C_out, H_out, W_out)) for one sample."""
        c, h, w = self.input_dims
        shapes = []
        for layer in self.layers:
            ho, wo = conv_output_hw(h, w, 3, 3, layer.stride, 1)
            if ho <= 0 or wo <= 0:
                raise ShapeError(f"input {self.input_dims} too small for the layer stack")
            shapes.append(((c, h, w), (layer.out_channels, ho, wo)))
            c, h, w = layer.out_channels, ho, wo
        return shapes

    def replace(self, **changes) -> "RepModel":
        return dataclasses.replace(self, **changes)


def merge_repblock(b: RepBlock) -> FusedConv:
    """Merge all branches of ``b`` into one 3x3 conv with bias."""
    o, i = b.out_channels, b.in_channels
    w, bias = fold_bn64(b.w3x3, None, b.bn3x3)
    if b.w1x1 is not None:
        w1, b1 = fold_bn64(b.w1x1, None, b.bn1x1)
        w[:, :, 1, 1] += w1[:, :, 0, 0]
        bias += b1
    if b.bn_id is not None:
        delta = np.zeros((o, i, 1, 1), dtype=np.float32)
        delta[np.arange(o), np.arange(o), 0, 0] = 1.0
        wid, bid = fold_bn64(delta, None, b.bn_id)
        w[:, :, 1, 1] += wid[:, :, 0, 0]
        bias += bid
    return FusedConv(w.astype(np.float32), bias.astype(np.float32), b.stride, b.relu)


def fuse_model(m: RepModel) -> RepModel:
    layers = [merge_repblock(l) if isinstance(l, RepBlock) else l for l in m.layers]
    return m.replace(layers=tuple(layers))


ActHook = Callable[[int, np.ndarray], np.ndarray]


def check_input(m: RepModel, x) -> np.ndarray:
    x = as_tensor(x, name="model input")
    if tuple(x.shape[1:]) != m.input_dims:
        raise ShapeError(f"model expects input (N, {', '.join(map(str, m.input_dims))}), got {x.shape}")
    return x


def forward(
    m: RepModel,
    x,
    capture: Iterable[int] | None = None,
    act_hook: ActHook | None = None,
    layers: dict[int, Layer] | None = None,
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Run ``m`` on ``x``; return logits and the captured pre-ReLU conv outputs.

    ``act_hook(k, y)`` may replace layer k's pre-ReLU output (applied after
    capture). ``layers`` overrides individual layers by index.
    """
    x = check_input(m, x)
    capture = set(capture or ())
    captured = {}
    for k, layer in enumerate(m.layers):
        if layers and k in layers:
            layer = layers[k]
        y = layer(x)
        if k in capture:
            captured[k] = y
        if act_hook is not None:
            y = act_hook(k, y)
        x = relu(y) if layer.relu else y
    return m.head(x), captured


def predict(m: RepModel, x) -> np.ndarray:
    return forward(m, x)[0]


def relative_deviation(ref, out) -> float:
    """max|ref - out| / max|ref| in float64 (0 when both are all-zero)."""
    r = np.asarray(ref, np.float64)
    d = float(np.max(np.abs(r - np.asarray(out, np.float64)), initial=0.0))
    peak = float(np.max(np.abs(r), initial=0.0))
    if peak == 0.0:
        return 0.0 if d == 0.0 else float("inf")
    return d / peak


def fusion_deviation(m: RepModel, x) -> float:
    """Largest relative deviation between multi-branch and merged forward.

    Each block is compared on the multi-branch network's own input to that
    block, so errors are not compounded across depth; the final logits of the
    two networks are compared as well.
    """
    x0 = check_input(m, x)
    x = x0
    worst = 0.0
    merged = {}
    for k, layer in enumerate(m.layers):
        y = layer(x)
        if isinstance(layer, RepBlock):
            merged[k] = merge_repblock(layer)
            worst = max(worst, relative_deviation(y, merged[k](x)))
        x = relu(y) if layer.relu else y
    if merged:
        worst = max(worst, relative_deviation(m.head(x), forward(m, x0, layers=merged)[0]))
    return worst
