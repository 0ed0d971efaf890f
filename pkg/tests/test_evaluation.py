import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from evpino.dataset import kinematics, make_windows
from evpino.errors import LengthError
from evpino.evaluation import (metrics, param_report, peaks_aligned, predict_log, psd_compare,
                               resample_log, resolution_eval, top_peaks, welch_psd)
from evpino.operator import OperatorConfig, OperatorModel
from evpino.physics import BASELINE_NAMES, VehicleSpec
from evpino.synth import SynthConfig, forward_oracle, gen_log

TINY = OperatorConfig(n_modes=2, width=4, n_layers=1, lift_hidden=4, window=16)


# ------------------------------------------------------------------ metrics
def test_metric_examples():
    same = metrics([1.0, 2.0, -1.0], [1.0, 2.0, -1.0])
    assert (same.mae, same.rmse, same.rmae, same.rrmse) == (0.0, 0.0, 0.0, 0.0)
    rep = metrics([1.0, 3.0], [0.0, 0.0])
    assert rep.mae == 2.0 and rep.scale == 2.0 and rep.rmae == 1.0
    assert rep.rmse == pytest.approx(math.sqrt(5), abs=1e-12)
    assert rep.rmse == pytest.approx(2.2361, abs=1e-4)


def test_metrics_without_positive_samples():
    rep = metrics([-1.0, 0.0], [0.0, 0.0])
    assert rep.mae == 0.5 and rep.rmae is None and rep.rrmse is None and rep.scale is None


def test_metrics_length_errors():
    with pytest.raises(LengthError):
        metrics([1.0, 2.0], [1.0])
    with pytest.raises(LengthError):
        metrics([], [])


series = hnp.arrays(np.float64, 20, elements=st.floats(-50, 50))


@settings(max_examples=60, deadline=None)
@given(series, series, st.floats(0.01, 100))
def test_metric_identities_and_homogeneity(t, p, c):
    t = np.abs(t) + 0.1
    rep = metrics(t, p)
    assert abs(rep.rmae * rep.scale - rep.mae) <= 1e-12 * max(1.0, rep.mae)
    assert abs(rep.rrmse * rep.scale - rep.rmse) <= 1e-12 * max(1.0, rep.rmse)
    scaled = metrics(c * t, c * p)
    assert scaled.mae == pytest.approx(c * rep.mae, rel=1e-9, abs=1e-12)
    assert scaled.rmae == pytest.approx(rep.rmae, rel=1e-9, abs=1e-12)
    assert scaled.rrmse == pytest.approx(rep.rrmse, rel=1e-9, abs=1e-12)


# ------------------------------------------------------------------ spectra
def test_sine_peak_matches_direct_dft():
    fs, n = 10.0, 256
    t = np.arange(n) / fs
    x = np.sin(2 * np.pi * 0.5 * t)
    freqs, psd = welch_psd(x, fs, seg_len=n)
    w = np.hanning(n + 1)[:-1]
    k = np.arange(n // 2 + 1)
    direct = np.abs(np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n) @ (w * x)) ** 2
    assert np.argmax(psd) == np.argmax(direct)
    assert abs(freqs[np.argmax(psd)] - 0.5) <= 0.5 * fs / n


def test_constant_series_concentrates_at_dc():
    x = np.full(512, 3.0)
    _, rect = welch_psd(x, 10.0, window="boxcar")
    assert rect[0] > 0 and np.all(rect[1:] < 1e-20 * rect[0])
    _, hann = welch_psd(x, 10.0)
    assert np.argmax(hann) == 0


def test_single_rectangular_segment_is_the_periodogram():
    rng = np.random.default_rng(1)
    n, fs = 256, 4.0
    x = rng.normal(size=n) + 0.3
    _, psd = welch_psd(x, fs, seg_len=n, window="boxcar")
    X = np.array([np.sum(x * np.exp(-2j * np.pi * k * np.arange(n) / n)) for k in range(n // 2 + 1)])
    want = np.abs(X) ** 2 / (fs * n)
    want[1:-1] *= 2
    np.testing.assert_allclose(psd, want, rtol=1e-10, atol=1e-12)


def test_parseval_with_hann():
    rng = np.random.default_rng(3)
    fs = 10.0
    x = rng.normal(size=20_000) * 2.0 + 1.5
    freqs, psd = welch_psd(x, fs)
    assert np.sum(psd) * (freqs[1] - freqs[0]) == pytest.approx(np.mean(x * x), rel=0.02)


def test_welch_argument_errors():
    with pytest.raises(LengthError):
        welch_psd(np.zeros(100), 10.0)
    with pytest.raises(Exception):
        welch_psd(np.zeros(300), 10.0, overlap_frac=1.0)


def tones(bins, n=4096, fs=10.0, seg=256, amps=(3.0, 2.0, 1.0)):
    t = np.arange(n) / fs
    return sum(a * np.sin(2 * np.pi * b * fs / seg * t + b) for a, b in zip(amps, bins))


def test_peak_picker_includes_endpoints():
    psd = np.array([9.0, 1.0, 2.0, 1.0, 5.0, 1.0, 0.5, 3.0])
    np.testing.assert_array_equal(top_peaks(psd), [0, 4, 7])


def test_psd_alignment_examples():
    fs = 10.0
    truth = tones([10, 25, 40])
    assert psd_compare(truth, truth, fs).aligned
    rng = np.random.default_rng(0)
    noise = rng.normal(size=truth.size) * np.sqrt(np.mean(truth ** 2) / 100.0)
    assert psd_compare(truth, truth + noise, fs).aligned
    shifted = tones([15, 30, 45])
    rep = psd_compare(truth, shifted, fs)
    assert not rep.aligned
    np.testing.assert_array_equal(rep.peaks_true, [10, 25, 40])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(3, 100), min_size=3, max_size=3, unique=True),
       st.lists(st.integers(3, 100), min_size=3, max_size=3, unique=True))
def test_alignment_verdict_is_symmetric(a, b):
    x, y = tones(a), tones(b)
    assert psd_compare(x, y, 10.0).aligned == psd_compare(y, x, 10.0).aligned
    assert peaks_aligned(a, b) == peaks_aligned(b, a)


# ------------------------------------------------------------------ stitching
@pytest.fixture(scope="module")
def small_log():
    return gen_log(SynthConfig(duration=30.0))


def test_stitched_prediction_length_and_values(small_log):
    model = OperatorModel(TINY)
    spec = VehicleSpec()
    ws = make_windows(small_log, 16, 4)
    pred = predict_log(model, small_log, spec, ws.scaler, stride=4)
    n = len(small_log)
    last_end = (n - 16) // 4 * 4 + 16
    assert len(pred) == last_end and pred.index[0] == 0 and pred.index[-1] == last_end - 1
    np.testing.assert_array_equal(pred.t, small_log.t[:last_end])
    # an untrained model is pointwise physics, so averaging overlaps changes nothing
    v, a = kinematics(small_log)
    mid = spec.midpoints()
    truth = SynthConfig(cd=mid["cd"], crr=mid["crr"], mass=mid["mass"], paux=mid["paux"],
                        eta=mid["eta"], mu=mid["mu"])
    np.testing.assert_allclose(pred.p_pred, forward_oracle(v[:last_end], a[:last_end], truth), rtol=1e-12)
    np.testing.assert_array_equal(pred.p_res, 0.0)
    np.testing.assert_allclose(pred.paux, mid["paux"] / 1000)


def test_stitching_averages_overlaps(small_log):
    model = OperatorModel(TINY, seed=2)
    rng = np.random.default_rng(0)
    model["buffer_head.w"].data[...] = rng.normal(size=(4, 1))
    ws = make_windows(small_log, 16, 8)
    pred = predict_log(model, small_log, VehicleSpec(), ws.scaler, stride=8)
    from evpino.training import predict_windows
    _, res, _ = predict_windows(model, ws, VehicleSpec())
    # sample 8 is covered by windows 0 and 1 at offsets 8 and 0
    assert pred.p_res[8] == pytest.approx(0.5 * (res[0, 8] + res[1, 0]), rel=1e-12)
    assert pred.p_res[0] == pytest.approx(res[0, 0], rel=1e-12)


def test_resolution_eval_same_rate_matches_standard(small_log):
    model = OperatorModel(TINY)
    spec = VehicleSpec()
    scaler = make_windows(small_log, 16, 4).scaler
    base = predict_log(model, small_log, spec, scaler, stride=4)
    out = resolution_eval(model, small_log, spec, scaler, [10.0, 5.0, 0.2], stride=4, edge_s=0.0)
    assert out[0].metrics == metrics(base.p_true, base.p_pred)
    trimmed = resolution_eval(model, small_log, spec, scaler, [10.0], stride=4, edge_s=2.0)[0]
    keep = (base.t >= 2.0) & (base.t <= small_log.t[-1] - 2.0)
    assert trimmed.metrics == metrics(base.p_true[keep], base.p_pred[keep])
    assert resolution_eval(model, small_log, spec, scaler, [10.0], edge_s=20.0)[0].metrics is None
    assert out[1].metrics is not None and out[1].n_samples == 150
    assert out[2].metrics is None and "skipped" in out[2].note


def test_resample_log_halves_rate(small_log):
    half = resample_log(small_log, 5.0)
    assert half.fs == 5.0 and len(half) == 150
    np.testing.assert_allclose(np.diff(half.t), 0.2)
    np.testing.assert_allclose(half.v[5:-5], small_log.v[::2][5:-5], atol=5e-3)


def test_param_report_untrained(small_log):
    spec = VehicleSpec()
    model = OperatorModel(TINY)
    ws = make_windows(small_log, 16, 8)
    rep = param_report(model, spec, ws, factory={"cd": 0.23})
    mid = spec.midpoints()
    for name in BASELINE_NAMES:
        assert rep[name].value == pytest.approx(mid[name])
    assert rep["cd"].reference == 0.23
    for name, key in (("eta_t", "eta"), ("mu_t", "mu")):
        lo, hi = spec.bounds(key)
        assert lo <= rep[name].q1 <= rep[name].median <= rep[name].q3 <= hi
