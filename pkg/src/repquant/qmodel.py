"""Weight/activation-quantized models: construction, simulated execution, files.

Execution is simulated quantization: integer codes are dequantized and run
through the float conv, CFWS layers through the dual coarse/fine path.
Each conv output is passed through ReLU (if any) and then fake-quantized
with the layer's calibrated activation scale. For a symmetric grid,
quantize-then-ReLU equals ReLU-then-quantize, so ReLU fusion only changes
which scale calibration picks.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from repquant.errors import ConfigError, FormatError, StructuralError
from repquant.modelio import read_blob, read_manifest, require, write_blob, write_manifest
from repquant.quant import (
    CFWSWeights,
    MinMaxWeights,
    QuantParams,
    cfws_conv,
    cfws_quantize,
    fake_quant,
    minmax_quantize,
)
from repquant.repnet import FusedConv, RepModel, check_input
from repquant.tensor import conv2d, global_avg_pool, linear, relu

QMODEL_FORMAT = "repquant-qmodel"
SCHEMES = ("minmax", "cfws")


@dataclass(frozen=True)
class QuantConv:
    weights: MinMaxWeights | CFWSWeights
    bias: np.ndarray
    stride: int = 1
    relu: bool = True
    act: QuantParams | None = None

    @property
    def scheme(self) -> str:
        return self.weights.scheme

    @property
    def out_channels(self) -> int:
        return self.bias.shape[0]

    @property
    def in_channels(self) -> int:
        codes = self.weights.codes if isinstance(self.weights, MinMaxWeights) else self.weights.fine
        return codes.shape[1]

    def conv(self, x: np.ndarray) -> np.ndarray:
        if isinstance(self.weights, CFWSWeights):
            return cfws_conv(x, self.weights, self.bias, self.stride)
        return conv2d(x, self.weights.dequantize(), self.bias, self.stride, pad=1)

    def activate(self, y: np.ndarray) -> np.ndarray:
        a = relu(y) if self.relu else y
        return fake_quant(a, self.act) if self.act is not None else a


@dataclass(frozen=True)
class QuantizedModel:
    layers: tuple
    head_weights: MinMaxWeights
    head_bias: np.ndarray
    input_dims: tuple
    num_classes: int
    relu_fused: bool = False
    meta: dict = dataclasses.field(default_factory=dict, compare=False)

    def forward(self, x, capture=None) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        x = check_input(self, x)
        capture = set(capture or ())
        captured = {}
        for k, layer in enumerate(self.layers):
            y = layer.conv(x)
            if k in capture:
                captured[k] = y
            x = layer.activate(y)
        logits = linear(global_avg_pool(x), self.head_weights.dequantize(), self.head_bias)
        return logits, captured

    def with_activation_scales(self, scales: dict, relu_fused: bool | None = None) -> "QuantizedModel":
        if set(scales) - set(range(len(self.layers))):
            raise ConfigError(f"activation scales reference unknown layers {sorted(set(scales))}")
        layers = tuple(dataclasses.replace(l, act=scales.get(k)) for k, l in enumerate(self.layers))
        fused = self.relu_fused if relu_fused is None else relu_fused
        return dataclasses.replace(self, layers=layers, relu_fused=fused)

    def weight_scheme_summary(self) -> list[dict]:
        out = []
        for k, l in enumerate(self.layers):
            w = l.weights
            rec = {"layer": k, "scheme": w.scheme, "bits": w.bits}
            if isinstance(w, CFWSWeights):
                rec["s_fine"] = _scale_json(w.s_fine)
                rec["s_coarse"] = _scale_json(w.s_coarse)
            else:
                rec["s_fine"] = _scale_json(w.params.scale)
            rec["act_scale"] = None if l.act is None else _scale_json(l.act.scale)
            rec["act_bits"] = None if l.act is None else l.act.bits
            out.append(rec)
        return out


def _scale_json(s):
    return float(s) if np.ndim(s) == 0 else [float(v) for v in np.asarray(s)]


def quantize_weights(m: RepModel, scheme: str = "cfws", bits: int = 8, per_channel: bool = False,
                     head_bits: int | None = None) -> QuantizedModel:
    """Quantize every fused conv with ``scheme``; the head always uses Min-Max."""
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown weight scheme '{scheme}'; choose from {SCHEMES}")
    if not m.is_fused:
        raise StructuralError("quantize_weights: model still contains rep-blocks; fuse it first")
    layers = []
    for layer in m.layers:
        if scheme == "cfws":
            w = cfws_quantize(layer.weight, bits, per_channel)
        else:
            w = minmax_quantize(layer.weight, bits, per_channel)
        layers.append(QuantConv(w, layer.bias, layer.stride, layer.relu))
    head = minmax_quantize(m.head.weight, head_bits or bits)
    meta = {"source": m.meta, "scheme": scheme, "bits": bits, "per_channel": per_channel}
    return QuantizedModel(tuple(layers), head, m.head.bias, m.input_dims, m.num_classes, meta=meta)


def dequantized_model(q: QuantizedModel) -> RepModel:
    """Float model carrying the reconstructed weights (activations unquantized)."""
    from repquant.repnet import LinearHead

    layers = tuple(FusedConv(l.weights.dequantize(), l.bias, l.stride, l.relu) for l in q.layers)
    return RepModel(layers, LinearHead(q.head_weights.dequantize(), q.head_bias), q.input_dims, q.num_classes)


def _params_record(p: QuantParams) -> dict:
    return {"scale": _scale_json(p.scale), "bits": p.bits}


def _params_from(rec, what: str) -> QuantParams:
    scale = require(rec, "scale", what)
    return QuantParams(np.asarray(scale, np.float32) if isinstance(scale, list) else scale, int(require(rec, "bits", what)))


def save_quantized_model(q: QuantizedModel, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    layers = []
    for k, l in enumerate(q.layers):
        w = l.weights
        rec = {"kind": "quant_conv", "stride": l.stride, "relu": l.relu,
               "in_channels": l.in_channels, "out_channels": l.out_channels,
               "bias": write_blob(root, f"l{k}_bias", l.bias),
               "act": None if l.act is None else _params_record(l.act)}
        if isinstance(w, CFWSWeights):
            rec["quant"] = {"scheme": "cfws", "bits": w.bits,
                            "s_fine": _scale_json(w.s_fine), "s_coarse": _scale_json(w.s_coarse),
                            "fine": write_blob(root, f"l{k}_fine", w.fine),
                            "coarse": write_blob(root, f"l{k}_coarse", w.coarse)}
        else:
            rec["quant"] = {"scheme": "minmax", "bits": w.bits, "s_fine": _scale_json(w.params.scale),
                            "fine": write_blob(root, f"l{k}_codes", w.codes)}
        layers.append(rec)
    doc = {
        "format": QMODEL_FORMAT, "version": 1, "endianness": "little",
        "input_dims": list(q.input_dims), "num_classes": q.num_classes,
        "relu_fused": q.relu_fused, "meta": q.meta, "layers": layers,
        "head": {"kind": "linear", "bias": write_blob(root, "head_bias", q.head_bias),
                 "quant": {"scheme": "minmax", "bits": q.head_weights.bits,
                           "s_fine": _scale_json(q.head_weights.params.scale),
                           "fine": write_blob(root, "head_codes", q.head_weights.codes)}},
    }
    write_manifest(root, doc)


def _read_weights(root: Path, rec: dict, what: str):
    scheme = require(rec, "scheme", what)
    bits = int(require(rec, "bits", what))
    fine = read_blob(root, require(rec, "fine", what), f"{what}.fine")
    s_fine = require(rec, "s_fine", what)
    s_fine = np.asarray(s_fine, np.float32) if isinstance(s_fine, list) else s_fine
    if scheme == "minmax":
        return MinMaxWeights(fine, QuantParams(s_fine, bits))
    if scheme == "cfws":
        s_coarse = require(rec, "s_coarse", what)
        s_coarse = np.asarray(s_coarse, np.float32) if isinstance(s_coarse, list) else s_coarse
        coarse = read_blob(root, require(rec, "coarse", what), f"{what}.coarse")
        return CFWSWeights(coarse, fine, QuantParams(s_coarse, bits).scale, QuantParams(s_fine, bits).scale, bits)
    raise FormatError(f"{what}: unknown scheme '{scheme}'")


def load_quantized_model(path) -> QuantizedModel:
    root = Path(path)
    doc = read_manifest(root, QMODEL_FORMAT)
    layers = []
    for k, rec in enumerate(require(doc, "layers", "manifest")):
        what = f"layers[{k}]"
        if require(rec, "kind", what) != "quant_conv":
            raise FormatError(f"{what}: unknown layer kind '{rec['kind']}'")
        act = rec.get("act")
        layers.append(QuantConv(
            _read_weights(root, require(rec, "quant", what), f"{what}.quant"),
            read_blob(root, require(rec, "bias", what), f"{what}.bias"),
            int(require(rec, "stride", what)), bool(require(rec, "relu", what)),
            None if act is None else _params_from(act, f"{what}.act"),
        ))
    head = require(doc, "head", "manifest")
    return QuantizedModel(
        tuple(layers),
        _read_weights(root, require(head, "quant", "head"), "head.quant"),
        read_blob(root, require(head, "bias", "head"), "head.bias"),
        tuple(require(doc, "input_dims", "manifest")),
        int(require(doc, "num_classes", "manifest")),
        bool(doc.get("relu_fused", False)),
        doc.get("meta", {}),
    )
