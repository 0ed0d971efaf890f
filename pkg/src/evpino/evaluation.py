"""Error metrics, Welch spectra, overlap-stitched prediction and resolution tests."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .dataset import DriveLog, make_windows
from .errors import ConfigError, LengthError
from .physics import BASELINE_NAMES, VehicleSpec
from .signal import SGConfig, resample
from .training import predict_windows

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ metrics
@dataclass(frozen=True)
class MetricsReport:
    """Absolute errors in kW and relative errors scaled by mean positive power.

    ``rmae``, ``rrmse`` and ``scale`` are ``None`` when the reference series
    has no positive sample.
    """

    mae: float
    rmse: float
    rmae: float | None
    rrmse: float | None
    scale: float | None
    n: int

    def as_row(self):
        return {"mae": self.mae, "rmse": self.rmse, "rmae": self.rmae, "rrmse": self.rrmse,
                "scale": self.scale, "n": self.n}


def metrics(p_true, p_pred):
    p_true = np.asarray(p_true, dtype=float).ravel()
    p_pred = np.asarray(p_pred, dtype=float).ravel()
    if p_true.size == 0 or p_true.size != p_pred.size:
        raise LengthError(f"metrics need equal non-empty series, got {p_true.size} and {p_pred.size}")
    e = p_pred - p_true
    mae = float(np.mean(np.abs(e)))
    rmse = float(np.sqrt(np.mean(e * e)))
    pos = p_true[p_true > 0]
    if pos.size == 0:
        return MetricsReport(mae, rmse, None, None, None, p_true.size)
    scale = float(pos.mean())
    return MetricsReport(mae, rmse, mae / scale, rmse / scale, scale, p_true.size)


# ------------------------------------------------------------------ spectra
def welch_psd(x, fs, seg_len=256, overlap_frac=0.5, window="hann"):
    """One-sided Welch density estimate; returns ``(freqs, psd)``.

    Segments are not detrended, so a constant offset shows up in bin 0.
    """
    x = np.asarray(x, dtype=float)
    if not 0.0 <= overlap_frac < 1.0:
        raise ConfigError(f"overlap_frac must lie in [0, 1), got {overlap_frac}")
    if seg_len < 2 or x.size < seg_len:
        raise LengthError(f"series of {x.size} samples is shorter than the segment length {seg_len}")
    noverlap = int(round(seg_len * overlap_frac))
    return sps.welch(x, fs=fs, window=window, nperseg=seg_len, noverlap=noverlap, detrend=False,
                     return_onesided=True, scaling="density")


def top_peaks(psd, k=3):
    """Bins of the ``k`` highest local maxima, endpoints included."""
    psd = np.asarray(psd, dtype=float)
    padded = np.concatenate([[-np.inf], psd, [-np.inf]])
    idx, _ = sps.find_peaks(padded)
    idx = idx - 1
    order = np.argsort(-psd[idx], kind="stable")
    return np.sort(idx[order[:k]])


def peaks_aligned(peaks_a, peaks_b, tol=1):
    """True when every peak of each set lies within ``tol`` bins of the other set."""
    a, b = np.asarray(peaks_a), np.asarray(peaks_b)
    if a.size == 0 or b.size == 0:
        return a.size == b.size

    def covered(x, y):
        return bool(np.all(np.min(np.abs(x[:, None] - y[None, :]), axis=1) <= tol))

    return covered(a, b) and covered(b, a)


@dataclass
class PsdReport:
    freqs: np.ndarray
    psd_true: np.ndarray
    psd_pred: np.ndarray
    peaks_true: np.ndarray
    peaks_pred: np.ndarray
    aligned: bool

    def write_csv(self, path_pred, path_true=None):
        """Two-column ``freq_hz,density`` files for the prediction and the truth."""
        write_psd_csv(path_pred, self.freqs, self.psd_pred)
        if path_true is not None:
            write_psd_csv(path_true, self.freqs, self.psd_true)


def psd_compare(p_true, p_pred, fs, seg_len=256, overlap_frac=0.5, window="hann", k=3, tol=1):
    p_true, p_pred = np.asarray(p_true, dtype=float), np.asarray(p_pred, dtype=float)
    if p_true.shape != p_pred.shape:
        raise LengthError(f"series lengths differ: {p_true.size} vs {p_pred.size}")
    freqs, s_true = welch_psd(p_true, fs, seg_len, overlap_frac, window)
    _, s_pred = welch_psd(p_pred, fs, seg_len, overlap_frac, window)
    pk_true, pk_pred = top_peaks(s_true, k), top_peaks(s_pred, k)
    return PsdReport(freqs, s_true, s_pred, pk_true, pk_pred, peaks_aligned(pk_pred, pk_true, tol))


# ------------------------------------------------------------------ prediction
@dataclass
class Prediction:
    """Stitched per-sample outputs over the samples covered by at least one window."""

    index: np.ndarray
    t: np.ndarray
    p_true: np.ndarray
    p_pred: np.ndarray
    p_res: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    paux: np.ndarray

    def __len__(self):
        return self.index.size

    def write_csv(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "p_true", "p_pred", "p_res", "eta_t", "mu_t", "paux_t"])
            for row in zip(self.t, self.p_true, self.p_pred, self.p_res, self.eta, self.mu, self.paux):
                w.writerow([repr(float(x)) for x in row])
        os.replace(tmp, path)


def _full(x, shape):
    return np.broadcast_to(np.asarray(getattr(x, "data", x), dtype=float), shape)


def predict_log(model, drive_log: DriveLog, spec: VehicleSpec, scaler, L=None, stride=None,
                sg: SGConfig | None = None):
    """Run ``model`` over every window of a log and average where windows overlap.

    Samples past the last full window (and windows that would cross a timing
    gap) are left out of the result.
    """
    L = L or model.cfg.window
    stride = stride or max(1, L // 4)
    if stride > L:
        raise ConfigError(f"stride {stride} longer than the window {L} leaves samples uncovered")
    ws = make_windows(drive_log, L, stride, scaler=scaler, sg=sg)
    traces, p_res, p_pred = predict_windows(model, ws, spec)
    shape = p_pred.shape
    eta = np.concatenate([_full(tr.eta, tr.eta.shape) for tr in traces])
    mu = np.concatenate([_full(tr.mu, tr.mu.shape) for tr in traces])
    paux = np.concatenate([_full(tr.paux, tr.eta.shape) for tr in traces]) * 1e-3
    n = len(drive_log)
    idx = (ws.starts[:, None] + np.arange(L)[None, :]).ravel()
    count = np.bincount(idx, minlength=n)
    covered = np.nonzero(count)[0]

    def stitch(x):
        total = np.bincount(idx, weights=np.reshape(x, shape).ravel(), minlength=n)
        return total[covered] / count[covered]

    return Prediction(index=covered, t=drive_log.t[covered], p_true=drive_log.p_bat[covered],
                      p_pred=stitch(p_pred), p_res=stitch(p_res), eta=stitch(eta), mu=stitch(mu),
                      paux=stitch(paux))


# ------------------------------------------------------------------ resolution
def resample_log(drive_log: DriveLog, fs_out):
    """Band-limited resampling of every channel onto a uniform ``fs_out`` grid."""
    if abs(fs_out - drive_log.fs) <= 1e-9 * drive_log.fs:
        return drive_log
    if np.any(drive_log.gaps()):
        raise ConfigError("cannot resample a log with timing gaps")
    v = resample(drive_log.v, drive_log.fs, fs_out)
    volt = resample(drive_log.volt, drive_log.fs, fs_out)
    p = resample(drive_log.p_bat, drive_log.fs, fs_out)
    t = drive_log.t[0] + np.arange(v.size) / fs_out
    return DriveLog(t=t, v=np.maximum(v, 0.0), volt=volt, amp=p * 1000.0 / volt, p_bat=p, fs=float(fs_out))


@dataclass
class RateResult:
    rate: float
    metrics: MetricsReport | None
    n_samples: int
    note: str = ""


def resolution_eval(model, drive_log: DriveLog, spec: VehicleSpec, scaler, rates, L=None,
                    stride=None, edge_s=5.0):
    """Metrics per sampling rate with shared weights and the same window length.

    Samples within ``edge_s`` seconds of either end of the log are left out at
    every rate, so the resampling filter's start-up transient is not scored.
    Rates whose resampled log cannot hold one window are skipped with a note.
    """
    L = L or model.cfg.window
    results = []
    for rate in rates:
        if rate <= 0:
            raise ConfigError(f"sampling rate must be positive, got {rate}")
        lg = resample_log(drive_log, rate)
        if len(lg) < L:
            note = f"skipped: {len(lg)} samples at {rate:g} Hz cannot fill a {L}-sample window"
            log.warning(note)
            results.append(RateResult(rate, None, len(lg), note))
            continue
        pred = predict_log(model, lg, spec, scaler, L=L, stride=stride)
        keep = (pred.t >= drive_log.t[0] + edge_s) & (pred.t <= drive_log.t[-1] - edge_s)
        if not keep.any():
            note = f"skipped: nothing left at {rate:g} Hz after trimming {edge_s:g} s edges"
            log.warning(note)
            results.append(RateResult(rate, None, len(lg), note))
            continue
        results.append(RateResult(rate, metrics(pred.p_true[keep], pred.p_pred[keep]), len(lg)))
    return results


def write_rates_csv(results, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rate_hz", "n_samples", "mae", "rmse", "rmae", "rrmse", "note"])
        for r in results:
            m = r.metrics
            vals = ["", "", "", ""] if m is None else [m.mae, m.rmse, m.rmae, m.rrmse]
            w.writerow([r.rate, r.n_samples, *["" if x is None else x for x in vals], r.note])


# ------------------------------------------------------------------ parameters
@dataclass
class ParamRow:
    name: str
    value: float | None = None
    median: float | None = None
    q1: float | None = None
    q3: float | None = None
    reference: float | None = None


@dataclass
class ParamReport:
    rows: list = field(default_factory=list)

    def __getitem__(self, name):
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "value", "median", "q1", "q3", "reference"])
            for r in self.rows:
                w.writerow([r.name, *["" if x is None else x for x in (r.value, r.median, r.q1, r.q3,
                                                                       r.reference)]])


def param_report(model, spec: VehicleSpec, windows=None, factory=None):
    """Bounded baselines plus median and quartiles of the time-varying parameters.

    ``factory`` optionally maps parameter names (``cd``, ..., ``eta_t``) to
    reference values shown alongside.
    """
    factory = factory or {}
    base = {k: v.item() for k, v in model.baselines(spec).items()}
    rows = [ParamRow(name, value=base[name], reference=factory.get(name)) for name in BASELINE_NAMES]
    if windows is not None and len(windows):
        traces, _, _ = predict_windows(model, windows, spec)
        series = {
            "eta_t": np.concatenate([np.ravel(tr.eta.data) for tr in traces]),
            "mu_t": np.concatenate([np.ravel(tr.mu.data) for tr in traces]),
        }
        if spec.paux_mode == "variable":
            series["paux_t"] = np.concatenate([np.ravel(tr.paux.data) for tr in traces])
        baseline_of = {"eta_t": "eta", "mu_t": "mu", "paux_t": "paux"}
        for name, x in series.items():
            q1, med, q3 = np.percentile(x, [25, 50, 75])
            rows.append(ParamRow(name, value=base[baseline_of[name]], median=float(med), q1=float(q1),
                                 q3=float(q3), reference=factory.get(name)))
    return ParamReport(rows)


def write_psd_csv(path, freqs, psd):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_hz", "density"])
        for f, d in zip(freqs, psd):
            w.writerow([repr(float(f)), repr(float(d))])


def write_metrics_csv(report: MetricsReport, path):
    row = report.as_row()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(row))
        w.writerow(["" if x is None else x for x in row.values()])
