import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from repquant.calib import (
    CalibConfig,
    Histogram,
    Metric,
    calibrate_network,
    collect_histogram,
    kl_divergence,
    kl_divergence_naive,
    load_cache,
    metric_curve,
    save_cache,
    scales_from_histograms,
    search_scale,
)
from repquant.errors import ConfigError, FormatError
from repquant.qmodel import quantize_weights
from repquant.quant import DEGENERATE_SCALE, minmax_scale
from tests.oracles import kl_curve_loops

probs = hnp.arrays(np.float64, st.integers(2, 64), elements=st.floats(0.0, 1.0)).filter(lambda p: p.sum() > 0)


def test_uniform_histogram_is_flat():
    x = np.arange(1000, dtype=np.float32) / 1000
    h = collect_histogram([x], CalibConfig(bins=4, relu_fused=False))
    assert h.total == 1000 and h.includes_negatives
    assert h.counts.max() - h.counts.min() <= 1


def test_histogram_two_pass_and_stream_order(rng):
    a = rng.standard_normal(10_000).astype(np.float32)
    cfg = CalibConfig(bins=512, relu_fused=False)
    whole = collect_histogram([a], cfg)
    parts = collect_histogram(np.array_split(a, 7), cfg)
    assert np.array_equal(whole.counts, parts.counts)
    assert whole.max_value == float(np.abs(a).max())
    assert whole.counts[-1] >= 1  # the max lands in the last bin


def test_relu_fused_histogram(rng):
    a = rng.standard_normal(4096).astype(np.float32)
    h = collect_histogram([a], CalibConfig(bins=256, relu_fused=True))
    assert not h.includes_negatives
    assert h.max_value == float(a.max())
    assert h.zero_count == int(np.sum(a <= 0))
    assert h.total == a.size


def test_histogram_merge_and_validation(rng):
    cfg = CalibConfig(bins=64)
    h = collect_histogram([rng.random(100)], cfg)
    m = h.merge(h)
    assert m.total == 200 and np.array_equal(m.counts, 2 * h.counts)
    with pytest.raises(ValueError):
        Histogram(4, 0.1, [1, 2, 3], 6, True, 1.0)


@given(probs)
def test_kl_self_is_zero(p):
    p = p / p.sum()
    assert abs(kl_divergence(p, p, eps=0)) <= 1e-7
    assert abs(kl_divergence(p, p)) <= 1e-7


@given(probs, probs)
def test_kl_non_negative(p, q):
    n = min(len(p), len(q))
    p, q = p[:n], q[:n]
    if p.sum() == 0 or q.sum() == 0:
        return
    assert kl_divergence(p / p.sum(), q / q.sum()) >= -1e-12


def test_kl_forms_agree_on_benign_input(rng):
    p = rng.random(128)
    q = rng.random(128)
    p, q = p / p.sum(), q / q.sum()
    assert kl_divergence(p, q) == pytest.approx(kl_divergence_naive(p, q), rel=1e-4)


def test_transformed_form_is_finite_with_tiny_bins():
    p = np.array([1e-45, 1e-40, 0.5, 0.5 - 2e-40, 1e-39], np.float64)
    q = np.array([0.5, 1e-44, 1e-41, 0.5, 1e-45], np.float64)
    for eps in (0.0, 1e-9):
        d = kl_divergence(p, q, eps)
        assert np.isfinite(d)


def test_kl_length_mismatch():
    with pytest.raises(ConfigError):
        kl_divergence(np.ones(3) / 3, np.ones(4) / 4)


@pytest.mark.parametrize("bits,bins", [(4, 64), (4, 100), (8, 512)])
def test_kl_curve_matches_loop_oracle(rng, bits, bins):
    a = np.abs(rng.standard_t(3, size=20_000)).astype(np.float32)
    cfg = CalibConfig(metric=Metric.KL_TRANSFORMED, relu_fused=False, bins=bins)
    h = collect_histogram([a], cfg)
    thresholds, loss = metric_curve(h, bits, cfg)
    levels = (1 << (bits - 1)) - 1
    start = max(1 << (bits - 1), levels)
    ref = kl_curve_loops(h.counts, levels, start)
    assert len(loss) == len(ref)
    np.testing.assert_allclose(loss, ref, rtol=1e-9, atol=1e-12)
    np.testing.assert_array_equal(thresholds, np.arange(start, bins + 1) * h.bin_width)


def test_minmax_metric_and_degenerate():
    a = np.array([0.0, -3.0, 1.0], np.float32)
    cfg = CalibConfig(metric="minmax", relu_fused=False)
    assert search_scale(collect_histogram([a], cfg), 8, cfg) == minmax_scale(a, 8)
    zero = collect_histogram([np.zeros(10)], CalibConfig())
    assert search_scale(zero, 8, CalibConfig()).scale == DEGENERATE_SCALE


@pytest.mark.parametrize("metric", [m for m in Metric if m is not Metric.MINMAX])
def test_search_never_exceeds_minmax(rng, metric):
    a = rng.standard_normal(50_000).astype(np.float32) ** 3
    cfg = CalibConfig(metric=metric, relu_fused=False)
    s = search_scale(collect_histogram([a], cfg), 8, cfg).scale
    assert 0 < s <= minmax_scale(a, 8).scale * (1 + 1e-6)


@given(st.integers(0, 2**31 - 1), st.sampled_from(list(Metric)))
def test_relu_fusion_never_widens_when_negatives_dominate(seed, metric):
    rng = np.random.default_rng(seed)
    pos = rng.exponential(1.0, 5000)
    neg = -rng.exponential(3.0, 5000) - pos.max()  # min(A) < -max(A)
    a = np.concatenate([pos, neg]).astype(np.float32)
    assert a.min() < -a.max()
    fused = CalibConfig(metric=metric, relu_fused=True)
    plain = CalibConfig(metric=metric, relu_fused=False)
    s_fused = search_scale(collect_histogram([a], fused), 8, fused).scale
    s_plain = search_scale(collect_histogram([a], plain), 8, plain).scale
    assert s_fused <= s_plain


def test_config_validation():
    with pytest.raises(ConfigError):
        CalibConfig(metric="l2")
    with pytest.raises(ConfigError):
        CalibConfig(sample_count=0)
    with pytest.raises(ConfigError):
        CalibConfig(bins=128).validate_bits(8)
    CalibConfig(bins=128, metric="minmax").validate_bits(16)
    assert Metric.parse("KL_NAIVE") is Metric.KL_NAIVE
    assert CalibConfig().first_bin(8) == 128


def test_calibrate_network_and_cache(tmp_path, small):
    _, fused, sets = small
    cfg = CalibConfig()
    hists = {}
    float_scales = calibrate_network(fused, sets.calib, cfg, histograms=hists)
    assert sorted(float_scales) == list(range(len(fused.layers)))
    q = quantize_weights(fused, "cfws")
    assert sorted(calibrate_network(q, sets.calib, cfg)) == sorted(float_scales)
    save_cache(tmp_path / "c.json", hists, {"seed": 3})
    back, meta = load_cache(tmp_path / "c.json")
    assert meta == {"seed": 3}
    assert all(np.array_equal(back[k].counts, hists[k].counts) for k in hists)
    assert scales_from_histograms(back, 8, cfg) == float_scales
    assert calibrate_network(fused, sets.calib, cfg) == float_scales  # deterministic


def test_cache_errors(tmp_path):
    with pytest.raises(FormatError):
        load_cache(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text('{"format": "repquant-calib-cache", "layers": {"0": {"bin_count": 2}}}')
    with pytest.raises(FormatError, match="layers"):
        load_cache(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        calibrate_network(None, np.zeros((0, 3, 4, 4)), CalibConfig())
