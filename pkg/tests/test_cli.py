import json

import numpy as np
import pytest

from repquant.analysis import QuantReport
from repquant.cli import main
from repquant.errors import ConfigError, FormatError, NumericError, ShapeError, StructuralError
from repquant.modelio import load_model, load_samples, save_model
from repquant.zoo import center_contains_surround

SMALL = json.dumps({"widths": [8, 8, 16], "strides": [2, 1, 2], "input_dims": [3, 16, 16],
                    "num_classes": 4, "probe_count": 64})


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen") / "s"
    assert main(["gen", "--seed", "5", "--arch", SMALL, "--eval-count", "48", "--out", str(out)]) == 0
    assert main(["fuse", "--model", str(out / "model"), "--out", str(out / "fused")]) == 0
    return out


def test_exit_codes_are_distinct():
    codes = [e.exit_code for e in (FormatError, ShapeError, NumericError, ConfigError, StructuralError)]
    assert len(set(codes)) == len(codes) and 0 not in codes and 2 not in codes


def test_gen_deterministic_and_defaults(tmp_path, gen_dir):
    out = tmp_path / "again"
    assert main(["gen", "--seed", "5", "--arch", SMALL, "--eval-count", "48", "--out", str(out)]) == 0
    a, b = tree_bytes(gen_dir), tree_bytes(out)
    assert {k: v for k, v in a.items() if not k.startswith("fused/")} == b
    calib, labels = load_samples(out / "calib")
    assert calib.shape == (32, 3, 16, 16) and labels is None
    ev, ev_labels = load_samples(out / "eval")
    assert ev.shape[0] == 48 and ev_labels.shape == (48,)


def test_gen_center_dominant_kernels(gen_dir):
    m = load_model(gen_dir / "fused")
    assert all(center_contains_surround(l.weight) for l in m.layers)


def test_gen_invalid_arch(tmp_path, capsys):
    code = main(["gen", "--arch", '{"widths": [8], "strides": [3]}', "--out", str(tmp_path / "x")])
    assert code == ConfigError.exit_code
    assert "strides" in capsys.readouterr().err


def test_fuse_reports_probe_and_is_noop_when_fused(tmp_path, gen_dir, capsys):
    assert main(["fuse", "--model", str(gen_dir / "model"), "--out", str(tmp_path / "f")]) == 0
    assert "probe equivalence" in capsys.readouterr().out
    assert tree_bytes(tmp_path / "f") == tree_bytes(gen_dir / "fused")
    assert main(["fuse", "--model", str(gen_dir / "fused"), "--out", str(tmp_path / "g")]) == 0
    assert "already fused" in capsys.readouterr().out
    assert tree_bytes(tmp_path / "g") == tree_bytes(gen_dir / "fused")


def test_fuse_corrupt_manifest(tmp_path, gen_dir, capsys):
    m = load_model(gen_dir / "model")
    save_model(m, tmp_path / "m")
    path = tmp_path / "m" / "manifest.json"
    doc = json.loads(path.read_text())
    del doc["layers"][0]["stride"]
    path.write_text(json.dumps(doc))
    code = main(["fuse", "--model", str(tmp_path / "m"), "--out", str(tmp_path / "f")])
    assert code == FormatError.exit_code
    err = capsys.readouterr().err
    assert "stride" in err and "load-model" in err


def _quantize(gen_dir, out, *extra):
    return main(["quantize", "--model", str(gen_dir / "fused"), "--samples", str(gen_dir / "calib"),
                 "--eval-samples", str(gen_dir / "eval"), "--out", str(out), *extra])


def test_quantize_outputs_and_determinism(tmp_path, gen_dir):
    assert _quantize(gen_dir, tmp_path / "a", "--relu-fused", "--seed", "11") == 0
    assert _quantize(gen_dir, tmp_path / "b", "--relu-fused", "--seed", "11") == 0
    a = tree_bytes(tmp_path / "a")
    assert a == tree_bytes(tmp_path / "b")
    assert {"report.json", "report.csv", "calib_cache.json", "qmodel/manifest.json"} <= set(a)
    r = QuantReport.from_json(a["report.json"].decode())
    assert r.seed == 11
    assert r.config["relu_fused"] and r.config["metric"] == "kl-transformed" and r.config["scheme"] == "cfws"
    assert r.fidelity.agreement is not None and len(r.layers) == 3


def test_quantize_32_bit_minmax_is_identity_like(tmp_path, bundled_dirs):
    model, calib, ev = bundled_dirs
    out = tmp_path / "q"
    assert main(["quantize", "--model", str(model), "--samples", str(calib), "--eval-samples", str(ev),
                 "--scheme", "minmax", "--metric", "minmax", "--bits", "32", "--out", str(out)]) == 0
    assert QuantReport.from_json((out / "report.json").read_text()).fidelity.agreement == 1.0


def test_quantize_cfws_beats_minmax_on_bundled(tmp_path, bundled_dirs):
    model, calib, ev = bundled_dirs
    cos = {}
    for scheme in ("cfws", "minmax"):
        out = tmp_path / scheme
        assert main(["quantize", "--model", str(model), "--samples", str(calib), "--eval-samples", str(ev),
                     "--scheme", scheme, "--relu-fused", "--out", str(out)]) == 0
        cos[scheme] = QuantReport.from_json((out / "report.json").read_text()).fidelity.cosine
    assert cos["cfws"] > cos["minmax"]


@pytest.fixture(scope="module")
def bundled_dirs(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundled")
    assert main(["gen", "--seed", "0", "--out", str(out)]) == 0
    return out / "model", out / "calib", out / "eval"


def test_quantize_synthesizes_samples_from_metadata(tmp_path, gen_dir):
    out = tmp_path / "q"
    assert main(["quantize", "--model", str(gen_dir / "model"), "--seed", "5", "--out", str(out)]) == 0
    r = QuantReport.from_json((out / "report.json").read_text())
    assert r.config["samples"] == "synthetic" and r.config["calib_count"] == 32


def test_quantize_config_file_and_override(tmp_path, gen_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scheme": "minmax", "metric": "mse", "bits": 8, "seed": 2}))
    assert _quantize(gen_dir, tmp_path / "q", "--config", str(cfg), "--seed", "9") == 0
    r = QuantReport.from_json((tmp_path / "q" / "report.json").read_text())
    assert (r.config["scheme"], r.config["metric"], r.seed) == ("minmax", "mse", 9)


@pytest.mark.parametrize("extra,code,stage", [
    (["--bits", "6"], ConfigError.exit_code, ""),
    (["--bits", "16"], ConfigError.exit_code, "config"),  # 2048 bins cannot resolve 16-bit KL levels
])
def test_quantize_errors(tmp_path, gen_dir, capsys, extra, code, stage):
    assert _quantize(gen_dir, tmp_path / "q", *extra) == code
    assert stage in capsys.readouterr().err


def test_quantize_shape_mismatch(tmp_path, gen_dir, bundled_dirs, capsys):
    _, calib, _ = bundled_dirs
    code = main(["quantize", "--model", str(gen_dir / "fused"), "--samples", str(calib), "--out", str(tmp_path / "q")])
    assert code == ShapeError.exit_code
    assert "calibrate" in capsys.readouterr().err


def test_analyze_single_alpha_and_determinism(tmp_path, gen_dir):
    args = ["analyze", "--model", str(gen_dir / "fused"), "--samples", str(gen_dir / "eval"), "--alphas", "1.0"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    r = QuantReport.from_json((tmp_path / "a" / "analysis.json").read_text())
    assert len(r.sweeps) == 6 and all(s.metric_values == [1.0] for s in r.sweeps)


def test_analyze_bops_matches_hand_arithmetic(tmp_path, gen_dir):
    out = tmp_path / "a"
    assert main(["analyze", "--model", str(gen_dir / "fused"), "--samples", str(gen_dir / "eval"),
                 "--alphas", "1.0", "--layers", "0", "--scheme", "minmax", "--out", str(out)]) == 0
    # 3->8 @ 8x8 out, 8->8 @ 8x8, 8->16 @ 4x4, head 16->4; all at 8x8 bits
    macs = 8 * 3 * 9 * 64 + 8 * 8 * 9 * 64 + 16 * 8 * 9 * 16 + 4 * 16
    r = QuantReport.from_json((out / "analysis.json").read_text())
    assert r.bops["total"] == 64 * macs
    lines = (out / "bops.csv").read_text().splitlines()
    assert lines[0] == "op,macs,bit_product,bops" and len(lines) == 5


def test_analyze_missing_samples(tmp_path, gen_dir):
    base = ["analyze", "--model", str(gen_dir / "fused"), "--out", str(tmp_path / "a")]
    assert main(base + ["--samples", str(tmp_path / "nope")]) == FormatError.exit_code
    assert main(base) == ConfigError.exit_code


def test_report_table(tmp_path, gen_dir, capsys):
    assert _quantize(gen_dir, tmp_path / "q", "--scheme", "minmax") == 0
    capsys.readouterr()
    assert main(["report", str(tmp_path / "q" / "report.json"), "--out", str(tmp_path / "t.csv")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("report,seed,command") and "minmax" in out
    assert (tmp_path / "t.csv").read_text() == out
    assert main(["report", str(tmp_path / "missing.json")]) == FormatError.exit_code
    assert main(["report"]) == ConfigError.exit_code


def test_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["quantize", "--scheme", "ternary"])
    assert e.value.code == 2
