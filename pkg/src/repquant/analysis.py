"""Diagnostics: clipping sweeps, the BOPs cost model and fidelity reports."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field

import numpy as np

from repquant.errors import ConfigError, FormatError, StructuralError
from repquant.qmodel import QuantizedModel
from repquant.repnet import FusedConv, RepModel, check_input, forward
from repquant.tensor import conv_output_hw, global_avg_pool, linear, relu

REPORT_FORMAT = "repquant-report"
SQNR_CLAMP_DB = 200.0
ALLOWED_BITS = (4, 8, 16, 32)


def default_alphas() -> tuple[float, ...]:
    """1.0 down to 0.05 in steps of 0.05."""
    return tuple(round(0.05 * i, 2) for i in range(20, 0, -1))


def logit_cosine(ref: np.ndarray, out: np.ndarray) -> float:
    """Mean per-sample cosine similarity; exactly 1.0 when the outputs are identical."""
    if np.array_equal(ref, out):
        return 1.0
    a = np.asarray(ref, np.float64).reshape(len(ref), -1)
    b = np.asarray(out, np.float64).reshape(len(out), -1)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    dot = np.sum(a * b, axis=1)
    both_zero = (na == 0) & (nb == 0)
    denom = np.where(na * nb > 0, na * nb, 1.0)
    cos = np.where(both_zero, 1.0, np.where(na * nb > 0, dot / denom, 0.0))
    return float(np.float32(np.clip(cos, -1.0, 1.0).mean()))


def agreement(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if labels.shape != (len(logits),):
        raise ConfigError(f"need {len(logits)} labels, got shape {labels.shape}")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def sqnr_db(ref: np.ndarray, out: np.ndarray) -> float:
    """10 log10(|ref|^2 / |ref - out|^2), clamped to +-SQNR_CLAMP_DB."""
    r = np.asarray(ref, np.float64)
    err = float(np.sum((r - np.asarray(out, np.float64)) ** 2))
    sig = float(np.sum(r * r))
    if err == 0.0:
        return SQNR_CLAMP_DB
    if sig == 0.0:
        return -SQNR_CLAMP_DB
    return float(np.clip(10.0 * np.log10(sig / err), -SQNR_CLAMP_DB, SQNR_CLAMP_DB))


# ---------------------------------------------------------------- clip sweeps

class Target(str, enum.Enum):
    WEIGHT = "weight"
    ACTIVATION = "activation"

    @classmethod
    def parse(cls, name) -> "Target":
        try:
            return cls(str(getattr(name, "value", name)).lower())
        except ValueError:
            raise ConfigError(f"unknown sweep target '{name}'; choose weight or activation") from None


@dataclass
class SweepCurve:
    alphas: list
    metric_values: list
    target: Target
    layer: int
    agreement: list | None = None
    clipped_fraction: list | None = None

    def __post_init__(self):
        self.target = Target.parse(self.target)
        self.alphas = [float(a) for a in self.alphas]
        self.metric_values = [float(np.float32(v)) for v in self.metric_values]
        if len(self.alphas) != len(self.metric_values):
            raise ConfigError("sweep: alphas and metric values differ in length")
        for extra in (self.agreement, self.clipped_fraction):
            if extra is not None and len(extra) != len(self.alphas):
                raise ConfigError("sweep: per-point lists differ in length")
        check_alphas(self.alphas)

    def to_dict(self) -> dict:
        return {"target": self.target.value, "layer": self.layer, "alphas": self.alphas,
                "metric_values": self.metric_values, "agreement": self.agreement,
                "clipped_fraction": self.clipped_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepCurve":
        try:
            return cls(d["alphas"], d["metric_values"], d["target"], int(d["layer"]),
                       d.get("agreement"), d.get("clipped_fraction"))
        except KeyError as e:
            raise FormatError(f"sweep record: missing field {e}") from None

    def rows(self) -> list[dict]:
        out = []
        for j, a in enumerate(self.alphas):
            out.append({"target": self.target.value, "layer": self.layer, "alpha": a,
                        "cosine": self.metric_values[j],
                        "agreement": "" if self.agreement is None else self.agreement[j],
                        "clipped_fraction": "" if self.clipped_fraction is None else self.clipped_fraction[j]})
        return out


def check_alphas(alphas) -> None:
    a = np.asarray(alphas, np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ConfigError("sweep: need at least one alpha")
    if np.any(a <= 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
        raise ConfigError("sweep: alphas must lie in (0, 1]")
    if np.any(np.diff(a) >= 0):
        raise ConfigError("sweep: alphas must be strictly decreasing")


def _clip(t: np.ndarray, bound: float) -> np.ndarray:
    return np.clip(t, -bound, bound).astype(np.float32)


def clip_sweep(m: RepModel, samples, target, layer: int, alphas=None, labels=None) -> SweepCurve:
    """Clip layer ``layer``'s weights or activations to [-a max|.|, a max|.|] for each alpha.

    No quantization is applied; each point records the logit cosine against
    the unclipped network (and top-1 agreement with ``labels`` if given).
    """
    target = Target.parse(target)
    if not isinstance(m, RepModel) or not m.is_fused:
        raise StructuralError("clip_sweep: model must be fused")
    if not isinstance(layer, (int, np.integer)) or not 0 <= layer < len(m.layers):
        raise ConfigError(f"clip_sweep: layer {layer} out of range [0, {len(m.layers)})")
    alphas = default_alphas() if alphas is None else tuple(float(a) for a in alphas)
    check_alphas(alphas)
    x = check_input(m, samples)
    ref, captured = forward(m, x, capture=[layer])
    base = m.layers[layer]
    tensor = base.weight if target is Target.WEIGHT else captured[layer]
    peak = float(np.max(np.abs(tensor))) if tensor.size else 0.0

    values, agree, frac = [], [], []
    for a in alphas:
        bound = a * peak
        frac.append(float(np.mean(np.abs(tensor) > bound)) if tensor.size else 0.0)
        if target is Target.WEIGHT:
            clipped = FusedConv(_clip(base.weight, bound), base.bias, base.stride, base.relu)
            out, _ = forward(m, x, layers={layer: clipped})
        else:
            def hook(k, y, bound=bound):
                return _clip(y, bound) if k == layer else y
            out, _ = forward(m, x, act_hook=hook)
        values.append(logit_cosine(ref, out))
        if labels is not None:
            agree.append(agreement(out, labels))
    return SweepCurve(list(alphas), values, target, int(layer), agree if labels is not None else None, frac)


# ------------------------------------------------------------------ BOPs model

@dataclass(frozen=True)
class BitConfig:
    """Per-layer (weight_bits, act_bits) and weight scheme, plus the head's bit pair."""

    layers: tuple
    schemes: tuple
    head: tuple = (8, 8)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple((int(w), int(a)) for w, a in self.layers))
        object.__setattr__(self, "schemes", tuple(str(s) for s in self.schemes))
        object.__setattr__(self, "head", tuple(int(b) for b in self.head))
        if len(self.layers) != len(self.schemes):
            raise ConfigError("bit config: one scheme per layer required")
        for pair in (*self.layers, self.head):
            if len(pair) != 2 or any(b not in ALLOWED_BITS for b in pair):
                raise ConfigError(f"bit config: bits must be in {ALLOWED_BITS}, got {pair}")
        bad = set(self.schemes) - {"minmax", "cfws"}
        if bad:
            raise ConfigError(f"bit config: unknown schemes {sorted(bad)}")

    @classmethod
    def uniform(cls, n_layers: int, bits: int = 8, scheme: str = "minmax", act_bits: int | None = None,
                head_bits: int | None = None) -> "BitConfig":
        a = act_bits or bits
        h = head_bits or bits
        return cls(((bits, a),) * n_layers, (scheme,) * n_layers, (h, a))

    @classmethod
    def for_model(cls, q: QuantizedModel) -> "BitConfig":
        """Bits of a quantized model; uncalibrated activations count at the weight width."""
        pairs = [(l.weights.bits, l.act.bits if l.act is not None else l.weights.bits) for l in q.layers]
        head_act = pairs[-1][1] if pairs else q.head_weights.bits
        return cls(tuple(pairs), tuple(l.scheme for l in q.layers), (q.head_weights.bits, head_act))


@dataclass(frozen=True)
class BopsResult:
    rows: tuple  # per op: {"op", "macs", "bit_product", "bops"}
    total: int

    @property
    def giga(self) -> float:
        return self.total / 1e9

    def to_dict(self) -> dict:
        return {"rows": [dict(r) for r in self.rows], "total": self.total, "giga": self.giga}


def conv_shapes(m) -> list[tuple[int, int, int, int, int]]:
    """(C_out, C_in, H_out, W_out, stride) of every 3x3 layer for one sample."""
    c, h, w = m.input_dims
    out = []
    for k, layer in enumerate(m.layers):
        ho, wo = conv_output_hw(h, w, 3, 3, layer.stride, 1)
        if ho <= 0 or wo <= 0:
            raise ConfigError(f"bops: layer {k} has no output positions for input {m.input_dims}")
        out.append((layer.out_channels, layer.in_channels, ho, wo, layer.stride))
        c, h, w = layer.out_channels, ho, wo
    return out


def bops(m, cfg: BitConfig) -> BopsResult:
    """sum(weight_bits * act_bits * MACs) over convs and the head.

    A CFWS layer adds its coarse 1x1 path (C_out * C_in per output position)
    at the layer's bit product. Bias adds and pooling are not counted.
    """
    shapes = conv_shapes(m)
    if len(shapes) != len(cfg.layers):
        raise ConfigError(f"bops: config has {len(cfg.layers)} layers, model has {len(shapes)}")
    rows = []
    for k, ((o, i, ho, wo, _), (wb, ab), scheme) in enumerate(zip(shapes, cfg.layers, cfg.schemes)):
        macs = o * i * 9 * ho * wo
        rows.append({"op": f"conv{k}", "macs": macs, "bit_product": wb * ab, "bops": wb * ab * macs})
        if scheme == "cfws":
            extra = o * i * ho * wo
            rows.append({"op": f"conv{k}.coarse", "macs": extra, "bit_product": wb * ab, "bops": wb * ab * extra})
    c_last = shapes[-1][0] if shapes else m.input_dims[0]
    macs = m.num_classes * c_last
    hb = cfg.head[0] * cfg.head[1]
    rows.append({"op": "head", "macs": macs, "bit_product": hb, "bops": hb * macs})
    return BopsResult(tuple(rows), int(sum(r["bops"] for r in rows)))


# ------------------------------------------------------------ fidelity reports

def layer_outputs(m, x) -> tuple[list[np.ndarray], np.ndarray]:
    """Every layer's emitted activation (after ReLU and any fake-quant) and the logits."""
    x = check_input(m, x)
    acts = []
    if isinstance(m, RepModel):
        for layer in m.layers:
            y = layer(x)
            x = relu(y) if layer.relu else y
            acts.append(x)
        return acts, m.head(x)
    for layer in m.layers:
        x = layer.activate(layer.conv(x))
        acts.append(x)
    return acts, linear(global_avg_pool(x), m.head_weights.dequantize(), m.head_bias)


def _architecture(m) -> list[tuple]:
    return [(l.in_channels, l.out_channels, l.stride, l.relu) for l in m.layers]


def check_same_architecture(a, b) -> None:
    if tuple(a.input_dims) != tuple(b.input_dims) or a.num_classes != b.num_classes:
        raise StructuralError(f"architecture mismatch: input {a.input_dims}/{a.num_classes} classes "
                              f"vs {b.input_dims}/{b.num_classes} classes")
    sa, sb = _architecture(a), _architecture(b)
    if len(sa) != len(sb):
        raise StructuralError(f"architecture mismatch: {len(sa)} vs {len(sb)} layers")
    for k, (u, v) in enumerate(zip(sa, sb)):
        if u != v:
            raise StructuralError(f"architecture mismatch at layer {k}: {u} vs {v}")


@dataclass
class Fidelity:
    layer_sqnr_db: list
    cosine: float
    agreement: float | None

    def to_dict(self) -> dict:
        return {"layer_sqnr_db": self.layer_sqnr_db, "cosine": self.cosine, "agreement": self.agreement}

    @classmethod
    def from_dict(cls, d: dict) -> "Fidelity":
        return cls([float(v) for v in d["layer_sqnr_db"]], float(d["cosine"]),
                   None if d.get("agreement") is None else float(d["agreement"]))


def fidelity_report(m_fp: RepModel, m_q, samples, labels=None) -> Fidelity:
    """Per-layer SQNR, final-logit cosine and top-1 agreement of ``m_q`` against ``m_fp``."""
    check_same_architecture(m_fp, m_q)
    x = check_input(m_fp, samples)
    acts_fp, logits_fp = layer_outputs(m_fp, x)
    acts_q, logits_q = layer_outputs(m_q, x)
    sq = [sqnr_db(a, b) for a, b in zip(acts_fp, acts_q)]
    agree = None if labels is None else agreement(logits_q, labels)
    return Fidelity(sq, logit_cosine(logits_fp, logits_q), agree)


# --------------------------------------------------------------------- reports

@dataclass
class QuantReport:
    seed: int
    config: dict = field(default_factory=dict)
    layers: list = field(default_factory=list)  # per-layer scheme / scale records
    bops: dict | None = None
    fidelity: Fidelity | None = None
    sweeps: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, "version": 1, "seed": self.seed, "config": self.config,
                "layers": self.layers, "bops": self.bops,
                "fidelity": None if self.fidelity is None else self.fidelity.to_dict(),
                "sweeps": [s.to_dict() for s in self.sweeps]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "QuantReport":
        if d.get("format") != REPORT_FORMAT:
            raise FormatError(f"report: field 'format' must be '{REPORT_FORMAT}'")
        if "seed" not in d:
            raise FormatError("report: missing field 'seed'")
        fid = d.get("fidelity")
        return cls(int(d["seed"]), d.get("config", {}), d.get("layers", []), d.get("bops"),
                   None if fid is None else Fidelity.from_dict(fid),
                   [SweepCurve.from_dict(s) for s in d.get("sweeps", [])])

    @classmethod
    def from_json(cls, text: str) -> "QuantReport":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise FormatError(f"report: invalid JSON ({e})") from None

    def layers_csv(self) -> str:
        """One row per layer: scheme, scales and SQNR."""
        cols = ["layer", "scheme", "bits", "s_fine", "s_coarse", "act_scale", "act_bits", "sqnr_db"]
        sq = self.fidelity.layer_sqnr_db if self.fidelity else []
        rows = []
        for rec in self.layers:
            k = rec.get("layer")
            row = {c: _csv_cell(rec.get(c)) for c in cols}
            row["sqnr_db"] = _csv_cell(sq[k] if isinstance(k, int) and k < len(sq) else None)
            rows.append(row)
        return _write_csv(cols, rows)

    def sweeps_csv(self) -> str:
        """One row per sweep point."""
        cols = ["target", "layer", "alpha", "cosine", "agreement", "clipped_fraction"]
        return _write_csv(cols, [r for s in self.sweeps for r in s.rows()])


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, list):
        return ";".join(repr(float(x)) for x in v)
    return v


def _write_csv(cols, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()

