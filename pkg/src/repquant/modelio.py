"""Directory-based model and sample-set files.

A model directory holds ``manifest.json`` plus one raw ``.bin`` blob per
tensor, little-endian, row-major. Blob records in the manifest look like
``{"file": "l0_w3x3.bin", "dims": [8, 3, 3, 3], "dtype": "float32"}``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from repquant.errors import FormatError, RepQuantError
from repquant.repnet import FusedConv, LinearHead, RepBlock, RepModel
from repquant.tensor import BatchNormParams

MODEL_FORMAT = "repquant-model"
SAMPLES_FORMAT = "repquant-samples"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": np.dtype("<f4"),
    "int8": np.dtype("i1"),
    "int16": np.dtype("<i2"),
    "int32": np.dtype("<i4"),
}
_DTYPE_NAMES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


def dtype_name(arr: np.ndarray) -> str:
    try:
        return _DTYPE_NAMES[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise FormatError(f"unsupported blob dtype {arr.dtype}") from None


def write_blob(root: Path, name: str, arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    kind = dtype_name(arr)
    fname = f"{name}.bin"
    (root / fname).write_bytes(arr.astype(_DTYPES[kind], copy=False).tobytes())
    return {"file": fname, "dims": list(arr.shape), "dtype": kind}


def read_blob(root: Path, rec, what: str) -> np.ndarray:
    if not isinstance(rec, dict):
        raise FormatError(f"{what}: expected a blob record, got {rec!r}")
    for key in ("file", "dims"):
        if key not in rec:
            raise FormatError(f"{what}: blob record missing '{key}'")
    kind = rec.get("dtype", "float32")
    if kind not in _DTYPES:
        raise FormatError(f"{what}: unknown dtype '{kind}'")
    path = root / rec["file"]
    if not path.is_file():
        raise FormatError(f"{what}: blob file '{rec['file']}' not found in {root}")
    dims = [int(d) for d in rec["dims"]]
    dtype = _DTYPES[kind]
    raw = path.read_bytes()
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{what}: blob '{rec['file']}' has {len(raw)} bytes, dims {dims} need {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def read_manifest(root: Path, fmt: str) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise FormatError(f"manifest.json not found in {root}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict) or doc.get("format") != fmt:
        raise FormatError(f"{path}: field 'format' must be '{fmt}'")
    if doc.get("endianness", "little") != "little":
        raise FormatError(f"{path}: field 'endianness' must be 'little'")
    return doc


def write_manifest(root: Path, doc: dict) -> None:
    (Path(root) / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def require(rec: dict, key: str, what: str):
    if not isinstance(rec, dict) or key not in rec:
        raise FormatError(f"{what}: missing field '{key}'")
    return rec[key]


def _write_bn(root: Path, prefix: str, bn: BatchNormParams) -> dict:
    return {
        "gamma": write_blob(root, f"{prefix}_gamma", bn.gamma),
        "beta": write_blob(root, f"{prefix}_beta", bn.beta),
        "running_mean": write_blob(root, f"{prefix}_mean", bn.running_mean),
        "running_var": write_blob(root, f"{prefix}_var", bn.running_var),
        "eps": bn.eps,
    }


def _read_bn(root: Path, rec: dict, what: str) -> BatchNormParams:
    vals = {k: read_blob(root, require(rec, k, what), f"{what}.{k}") for k in ("gamma", "beta", "running_mean", "running_var")}
    return BatchNormParams(eps=float(require(rec, "eps", what)), **vals)


def layer_record(root: Path, k: int, layer) -> dict:
    common = {"stride": layer.stride, "relu": layer.relu,
              "in_channels": layer.in_channels, "out_channels": layer.out_channels}
    if isinstance(layer, FusedConv):
        return {"kind": "fused_conv", **common,
                "weight": write_blob(root, f"l{k}_weight", layer.weight),
                "bias": write_blob(root, f"l{k}_bias", layer.bias)}
    rec = {"kind": "repblock", **common,
           "branch3x3": {"weight": write_blob(root, f"l{k}_w3x3", layer.w3x3),
                         "bn": _write_bn(root, f"l{k}_bn3x3", layer.bn3x3)},
           "branch1x1": None, "branch_id": None}
    if layer.w1x1 is not None:
        rec["branch1x1"] = {"weight": write_blob(root, f"l{k}_w1x1", layer.w1x1),
                            "bn": _write_bn(root, f"l{k}_bn1x1", layer.bn1x1)}
    if layer.bn_id is not None:
        rec["branch_id"] = {"bn": _write_bn(root, f"l{k}_bnid", layer.bn_id)}
    return rec


def read_layer(root: Path, rec: dict, what: str):
    kind = require(rec, "kind", what)
    stride = int(require(rec, "stride", what))
    use_relu = bool(require(rec, "relu", what))
    if kind == "fused_conv":
        return FusedConv(read_blob(root, require(rec, "weight", what), f"{what}.weight"),
                         read_blob(root, require(rec, "bias", what), f"{what}.bias"),
                         stride, use_relu)
    if kind == "repblock":
        b3 = require(rec, "branch3x3", what)
        kwargs = {"w3x3": read_blob(root, require(b3, "weight", f"{what}.branch3x3"), f"{what}.branch3x3.weight"),
                  "bn3x3": _read_bn(root, require(b3, "bn", f"{what}.branch3x3"), f"{what}.branch3x3.bn")}
        b1 = rec.get("branch1x1")
        if b1 is not None:
            kwargs["w1x1"] = read_blob(root, require(b1, "weight", f"{what}.branch1x1"), f"{what}.branch1x1.weight")
            kwargs["bn1x1"] = _read_bn(root, require(b1, "bn", f"{what}.branch1x1"), f"{what}.branch1x1.bn")
        bid = rec.get("branch_id")
        if bid is not None:
            kwargs["bn_id"] = _read_bn(root, require(bid, "bn", f"{what}.branch_id"), f"{what}.branch_id.bn")
        return RepBlock(stride=stride, relu=use_relu, **kwargs)
    raise FormatError(f"{what}: unknown layer kind '{kind}'")


def save_model(m: RepModel, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "endianness": "little",
        "input_dims": list(m.input_dims),
        "num_classes": m.num_classes,
        "meta": m.meta,
        "layers": [layer_record(root, k, layer) for k, layer in enumerate(m.layers)],
        "head": {"kind": "linear",
                 "weight": write_blob(root, "head_weight", m.head.weight),
                 "bias": write_blob(root, "head_bias", m.head.bias)},
    }
    write_manifest(root, doc)


def load_model(path) -> RepModel:
    root = Path(path)
    doc = read_manifest(root, MODEL_FORMAT)
    layers = require(doc, "layers", "manifest")
    if not isinstance(layers, list):
        raise FormatError("manifest: field 'layers' must be a list")
    parsed = [read_layer(root, rec, f"layers[{k}]") for k, rec in enumerate(layers)]
    head = require(doc, "head", "manifest")
    if require(head, "kind", "head") != "linear":
        raise FormatError(f"head: unknown layer kind '{head['kind']}'")
    try:
        return RepModel(
            layers=tuple(parsed),
            head=LinearHead(read_blob(root, require(head, "weight", "head"), "head.weight"),
                            read_blob(root, require(head, "bias", "head"), "head.bias")),
            input_dims=tuple(require(doc, "input_dims", "manifest")),
            num_classes=int(require(doc, "num_classes", "manifest")),
            meta=doc.get("meta", {}),
        )
    except RepQuantError as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"manifest: inconsistent model ({e})") from e


def save_samples(path, x: np.ndarray, labels: np.ndarray | None = None, meta: dict | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": SAMPLES_FORMAT,
        "version": FORMAT_VERSION,
        "endianness": "little",
        "meta": meta or {},
        "data": write_blob(root, "data", np.asarray(x, dtype=np.float32)),
        "labels": None if labels is None else write_blob(root, "labels", np.asarray(labels, dtype=np.int32)),
    }
    write_manifest(root, doc)


def load_samples(path) -> tuple[np.ndarray, np.ndarray | None]:
    root = Path(path)
    doc = read_manifest(root, SAMPLES_FORMAT)
    x = read_blob(root, require(doc, "data", "manifest"), "data")
    if x.ndim != 4:
        raise FormatError(f"data: expected NCHW dims, got {list(x.shape)}")
    labels = None
    if doc.get("labels") is not None:
        labels = read_blob(root, doc["labels"], "labels")
        if labels.shape != (x.shape[0],):
            raise FormatError(f"labels: expected dims [{x.shape[0]}], got {list(labels.shape)}")
    return x, labels
