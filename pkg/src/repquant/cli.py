"""Command-line pipeline: gen -> fuse -> quantize -> analyze -> report.

Every option can also come from a JSON document passed with ``--config``;
flags given on the command line win. Exit codes: 0 success, 2 usage,
3 format, 4 shape, 5 numeric, 6 config, 7 structural error.

Examples:
  repquant gen --seed 0 --out runs/synth
  repquant fuse --model runs/synth/model --out runs/synth/fused
  repquant quantize --model runs/synth/fused --samples runs/synth/calib \\
      --eval-samples runs/synth/eval --scheme cfws --metric kl-transformed --relu-fused --out runs/q
  repquant analyze --model runs/synth/fused --samples runs/synth/eval --layers 2,4 --out runs/a
  repquant report runs/q/report.json
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from repquant.analysis import (
    ALLOWED_BITS,
    BitConfig,
    QuantReport,
    bops,
    check_alphas,
    clip_sweep,
    default_alphas,
    fidelity_report,
)
from repquant.calib import CalibConfig, Metric, calibrate_network, save_cache
from repquant.errors import ConfigError, FormatError, RepQuantError, StructuralError
from repquant.modelio import load_model, load_samples, save_model, save_samples
from repquant.qmodel import SCHEMES, quantize_weights, save_quantized_model
from repquant.repnet import RepModel, fuse_model, fusion_deviation, predict
from repquant.zoo import ArchSpec, build_repvgg, center_contains_surround, make_sample_sets

FUSE_TOLERANCE = 1e-4
PROBE_COUNT = 4

DEFAULTS = {
    "seed": 0, "scheme": "cfws", "metric": Metric.KL_TRANSFORMED.value, "relu_fused": False,
    "bits": 8, "bins": 2048, "calib_count": 32, "eval_count": 256, "arch": {},
    "target": "both", "layers": None, "alphas": None,
}


@contextmanager
def stage(name: str):
    """Tag errors escaping the block with the pipeline stage they came from."""
    try:
        yield
    except RepQuantError as e:
        if getattr(e, "stage", None) is None:
            e.stage = name
        raise


def _opts(args) -> dict:
    """Merge built-in defaults, the --config document and explicit flags."""
    merged = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file '{path}' not found")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        merged.update({k.replace("-", "_"): v for k, v in doc.items()})
    merged.update({k: v for k, v in vars(args).items() if v is not None and k not in ("func", "config")})
    return merged


def _need(opts: dict, key: str) -> str:
    if opts.get(key) in (None, ""):
        raise ConfigError(f"missing required option --{key.replace('_', '-')}")
    return opts[key]


def _int_list(v) -> list[int] | None:
    if v is None:
        return None
    if isinstance(v, str):
        v = [p for p in v.split(",") if p.strip()]
    try:
        return [int(p) for p in v]
    except (TypeError, ValueError):
        raise ConfigError(f"expected a comma-separated integer list, got {v!r}") from None


def _float_list(v) -> list[float] | None:
    if v is None:
        return None
    if isinstance(v, str):
        v = [p for p in v.split(",") if p.strip()]
    try:
        return [float(p) for p in v]
    except (TypeError, ValueError):
        raise ConfigError(f"expected a comma-separated number list, got {v!r}") from None


def _bits(opts) -> int:
    bits = int(opts["bits"])
    if bits not in ALLOWED_BITS:
        raise ConfigError(f"--bits must be one of {ALLOWED_BITS}, got {bits}")
    return bits


def _load_fused(path: str) -> RepModel:
    with stage("load-model"):
        m = load_model(path)
    if not m.is_fused:
        with stage("fuse"):
            m = fuse_model(m)
        print("note: model contains rep-blocks; fused before use", file=sys.stderr)
    return m


# ---------------------------------------------------------------- commands

def cmd_gen(opts) -> int:
    out = Path(_need(opts, "out"))
    seed = int(opts["seed"])
    arch_doc = dict(opts["arch"] or {})
    if opts.get("no_center_dominant"):
        arch_doc["center_dominant"] = False
    with stage("generate"):
        arch = ArchSpec.from_dict(arch_doc)
        m = build_repvgg(seed, arch)
        sets = make_sample_sets(m, seed, int(opts["calib_count"]), int(opts["eval_count"]))
    fused = fuse_model(m)
    if arch.center_dominant:
        bad = [k for k, l in enumerate(fused.layers) if not center_contains_surround(l.weight)]
        if bad:
            raise StructuralError(f"center-dominant model: fused layers {bad} violate center-range containment")
    with stage("write"):
        save_model(m, out / "model")
        save_samples(out / "calib", sets.calib, meta={"seed": seed, "role": "calibration"})
        save_samples(out / "eval", sets.eval_x, sets.eval_labels, meta={"seed": seed, "role": "eval"})
    print(f"gen: seed {seed}, {len(m.layers)} rep-blocks, {len(sets.calib)} calibration / "
          f"{len(sets.eval_x)} eval samples -> {out}")
    return 0


def cmd_fuse(opts) -> int:
    src, out = _need(opts, "model"), Path(_need(opts, "out"))
    with stage("load-model"):
        m = load_model(src)
    if m.is_fused:
        with stage("write"):
            save_model(m, out)
        print(f"fuse: {src} is already fused; copied to {out}")
        return 0
    with stage("fuse"):
        fused = fuse_model(m)
        rng = np.random.default_rng(int(opts["seed"]))
        probe = rng.standard_normal((PROBE_COUNT, *m.input_dims)).astype(np.float32)
        dev = fusion_deviation(m, probe)
    print(f"fuse: probe equivalence max relative deviation {dev:.3e} (tolerance {FUSE_TOLERANCE:g})")
    if not dev <= FUSE_TOLERANCE:
        raise StructuralError(f"fused model deviates from the multi-branch model by {dev:.3e}")
    with stage("write"):
        save_model(fused, out)
    print(f"fuse: {len(fused.layers)} layers -> {out}")
    return 0


def _calibration_set(opts, m: RepModel):
    """Calibration batch and eval batch with labels, plus their provenance."""
    seed = int(opts["seed"])
    synth = None
    if opts.get("samples"):
        calib, _ = load_samples(opts["samples"])
        calib_src = str(opts["samples"])
    else:
        synth = make_sample_sets(m, seed, int(opts["calib_count"]), int(opts["eval_count"]))
        calib, calib_src = synth.calib, "synthetic"
    if opts.get("eval_samples"):
        ev, labels = load_samples(opts["eval_samples"])
        ev_src = str(opts["eval_samples"])
    elif synth is not None or m.meta.get("generator"):
        synth = synth or make_sample_sets(m, seed, int(opts["calib_count"]), int(opts["eval_count"]))
        ev, labels, ev_src = synth.eval_x, synth.eval_labels, "synthetic"
    else:
        ev, labels, ev_src = calib, None, "calibration"
    if labels is None:
        labels = np.argmax(predict(m, ev), axis=1).astype(np.int32)
    return calib, ev, labels, {"samples": calib_src, "eval_samples": ev_src}


def cmd_quantize(opts) -> int:
    out = Path(_need(opts, "out"))
    m = _load_fused(_need(opts, "model"))
    bits, scheme = _bits(opts), opts["scheme"]
    if scheme not in SCHEMES:
        raise ConfigError(f"--scheme must be one of {SCHEMES}")
    with stage("config"):
        cfg = CalibConfig(metric=Metric.parse(opts["metric"]), relu_fused=bool(opts["relu_fused"]),
                          bins=int(opts["bins"]), sample_count=int(opts["calib_count"]))
        cfg.validate_bits(bits)
    with stage("load-samples"):
        calib, ev, labels, provenance = _calibration_set(opts, m)
    with stage("quantize-weights"):
        q = quantize_weights(m, scheme, bits)
    with stage("calibrate"):
        histograms = {}
        scales = calibrate_network(q, calib, cfg, bits, histograms=histograms)
        q = q.with_activation_scales(scales, cfg.relu_fused)
    with stage("report"):
        fid = fidelity_report(m, q, ev, labels)
        config = {"command": "quantize", "scheme": scheme, "metric": cfg.metric.value,
                  "relu_fused": cfg.relu_fused, "bits": bits, "bins": cfg.bins,
                  "calib_count": int(len(calib)), "eval_count": int(len(ev)),
                  "model": str(opts["model"]), **provenance}
        report = QuantReport(int(opts["seed"]), config, q.weight_scheme_summary(),
                             bops(m, BitConfig.for_model(q)).to_dict(), fid)
    with stage("write"):
        out.mkdir(parents=True, exist_ok=True)
        save_quantized_model(q, out / "qmodel")
        save_cache(out / "calib_cache.json", histograms, {"metric": cfg.metric.value, "relu_fused": cfg.relu_fused,
                                                         "bins": cfg.bins, "seed": int(opts["seed"])})
        (out / "report.json").write_text(report.to_json())
        (out / "report.csv").write_text(report.layers_csv())
    agree = "n/a" if fid.agreement is None else f"{fid.agreement:.4f}"
    print(f"quantize: {scheme} w{bits}/a{bits}, {cfg.metric.value}{' +relu-fused' if cfg.relu_fused else ''}: "
          f"cosine {fid.cosine:.6f}, top-1 agreement {agree}, {report.bops['giga']:.4f} GBOPs -> {out}")
    return 0


def cmd_analyze(opts) -> int:
    out = Path(_need(opts, "out"))
    m = _load_fused(_need(opts, "model"))
    bits, scheme = _bits(opts), opts["scheme"]
    with stage("load-samples"):
        x, labels = load_samples(_need(opts, "samples"))
    with stage("config"):
        layers = _int_list(opts["layers"])
        layers = list(range(len(m.layers))) if layers is None else layers
        alphas = _float_list(opts["alphas"])
        alphas = list(default_alphas()) if alphas is None else alphas
        check_alphas(alphas)
        target = opts["target"]
        targets = ["weight", "activation"] if target == "both" else [target]
        cfg = BitConfig.uniform(len(m.layers), bits, scheme)
    with stage("sweep"):
        curves = [clip_sweep(m, x, t, k, alphas, labels) for t in targets for k in layers]
    with stage("bops"):
        table = bops(m, cfg)
    config = {"command": "analyze", "scheme": scheme, "bits": bits, "target": target,
              "layers": layers, "alphas": alphas, "model": str(opts["model"]), "samples": str(opts["samples"])}
    report = QuantReport(int(opts["seed"]), config, bops=table.to_dict(), sweeps=curves)
    with stage("write"):
        out.mkdir(parents=True, exist_ok=True)
        (out / "analysis.json").write_text(report.to_json())
        (out / "sweeps.csv").write_text(report.sweeps_csv())
        lines = ["op,macs,bit_product,bops"] + [f"{r['op']},{r['macs']},{r['bit_product']},{r['bops']}"
                                                 for r in table.rows]
        (out / "bops.csv").write_text("\n".join(lines) + "\n")
    print(f"analyze: {len(curves)} sweep curves, {table.giga:.4f} GBOPs ({scheme}, {bits}x{bits} bits) -> {out}")
    return 0


def cmd_report(opts) -> int:
    paths = opts.get("reports") or []
    if not paths:
        raise ConfigError("report: give at least one report.json path")
    rows = []
    for p in paths:
        path = Path(p)
        if not path.is_file():
            raise FormatError(f"report '{path}' not found")
        with stage("read"):
            r = QuantReport.from_json(path.read_text())
        c = r.config
        fid = r.fidelity
        rows.append({
            "report": str(path), "seed": r.seed, "command": c.get("command", ""),
            "scheme": c.get("scheme", ""), "metric": c.get("metric", ""),
            "relu_fused": c.get("relu_fused", ""), "bits": c.get("bits", ""),
            "cosine": "" if fid is None else f"{fid.cosine:.6f}",
            "agreement": "" if fid is None or fid.agreement is None else f"{fid.agreement:.4f}",
            "min_sqnr_db": "" if fid is None or not fid.layer_sqnr_db else f"{min(fid.layer_sqnr_db):.2f}",
            "gbops": "" if r.bops is None else f"{r.bops['giga']:.4f}",
            "sweeps": len(r.sweeps),
        })
    cols = list(rows[0])
    text = "\n".join([",".join(cols)] + [",".join(str(row[c]) for c in cols) for row in rows]) + "\n"
    if opts.get("out"):
        out = Path(opts["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON document with option values (flags override it)")
    common.add_argument("--seed", type=int, help="random seed, recorded in every report (default 0)")
    common.add_argument("--out", help="output directory (file for `report`)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", help="model directory")

    quant = argparse.ArgumentParser(add_help=False)
    quant.add_argument("--scheme", choices=SCHEMES, help="weight scheme (default cfws)")
    quant.add_argument("--bits", type=int, help=f"bit width, one of {ALLOWED_BITS} (default 8)")

    p = argparse.ArgumentParser(prog="repquant", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic rep-model and sample sets")
    g.add_argument("--arch", type=json.loads, help='architecture JSON, e.g. \'{"widths": [8, 8], "strides": [2, 1]}\'')
    g.add_argument("--no-center-dominant", action="store_true", default=None,
                   help="draw identity / 1x1 BN gains like the 3x3 branch")
    g.add_argument("--calib-count", type=int, help="calibration samples (default 32)")
    g.add_argument("--eval-count", type=int, help="self-labeled eval samples (default 256)")
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fuse", parents=[common, model], help="merge rep-blocks into single 3x3 convs")
    f.set_defaults(func=cmd_fuse)

    q = sub.add_parser("quantize", parents=[common, model, quant], help="quantize weights and calibrate activations")
    q.add_argument("--samples", help="calibration sample set (default: synthesize from model metadata)")
    q.add_argument("--eval-samples", help="labeled eval set for the fidelity report")
    q.add_argument("--metric", choices=[m.value for m in Metric], help="activation metric (default kl-transformed)")
    q.add_argument("--relu-fused", action=argparse.BooleanOptionalAction, default=None,
                   help="calibrate on post-ReLU activations")
    q.add_argument("--bins", type=int, help="histogram bins (default 2048)")
    q.add_argument("--calib-count", type=int, help="synthetic calibration samples (default 32)")
    q.add_argument("--eval-count", type=int, help="synthetic eval samples (default 256)")
    q.set_defaults(func=cmd_quantize)

    a = sub.add_parser("analyze", parents=[common, model, quant], help="clipping sweeps and BOPs")
    a.add_argument("--samples", help="sample set to sweep on (labels give top-1 agreement)")
    a.add_argument("--target", choices=["weight", "activation", "both"], help="what to clip (default both)")
    a.add_argument("--layers", help="comma-separated layer indices (default all)")
    a.add_argument("--alphas", help="comma-separated clip ratios, descending (default 1.0 to 0.05 by 0.05)")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", parents=[common], help="tabulate one or more report.json files")
    r.add_argument("reports", nargs="*", help="report.json paths")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(_opts(args))
    except RepQuantError as e:
        where = f" [{e.stage}]" if getattr(e, "stage", None) else ""
        print(f"repquant {args.command}{where}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
