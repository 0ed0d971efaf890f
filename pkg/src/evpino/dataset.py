"""Drive-log ingestion, kinematics, standardization and windowing."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, LengthError, ParseError
from .signal import SGConfig, sg_derivative, sg_smooth

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
KPH_TO_MPS = 1.0 / 3.6


@dataclass(frozen=True)
class LogSchema:
    """Column mapping of a CSV drive log."""

    time: str = "t"
    speed: str = "v"
    volt: str = "volt"
    amp: str = "amp"
    speed_unit: str = "mps"
    current_sign: str = "discharge_positive"

    def __post_init__(self):
        if self.speed_unit not in ("mps", "kph"):
            raise ConfigError(f"speed_unit must be 'mps' or 'kph', got {self.speed_unit!r}")
        if self.current_sign not in ("discharge_positive", "discharge_negative"):
            raise ConfigError(f"unknown current_sign {self.current_sign!r}")


@dataclass
class DriveLog:
    """Time series sampled at ``fs`` Hz. ``p_bat`` is in kW, discharge positive."""

    t: np.ndarray
    v: np.ndarray
    volt: np.ndarray
    amp: np.ndarray
    p_bat: np.ndarray
    fs: float

    def __post_init__(self):
        for name in ("t", "v", "volt", "amp", "p_bat"):
            arr = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, arr)
            if arr.shape != self.t.shape:
                raise ParseError(f"column {name} has {arr.size} rows, expected {self.t.size}")
            if not np.all(np.isfinite(arr)):
                raise ParseError(f"column {name} contains non-finite values")
        if self.t.size > 1 and np.any(np.diff(self.t) <= 0):
            raise ParseError("time stamps must be strictly increasing")

    def __len__(self):
        return self.t.size

    def gaps(self):
        """Boolean per step ``i -> i+1``: True where the spacing breaks the sample rate."""
        return np.abs(np.diff(self.t) - 1.0 / self.fs) >= 0.01 / self.fs

    def slice(self, start, stop):
        return replace(self, t=self.t[start:stop], v=self.v[start:stop], volt=self.volt[start:stop],
                       amp=self.amp[start:stop], p_bat=self.p_bat[start:stop])


def _infer_fs(t):
    if t.size < 2:
        raise ParseError("need at least two rows to infer the sample rate")
    return float(1.0 / np.median(np.diff(t)))


def load_log(path, schema: LogSchema = LogSchema()):
    """Read a UTF-8 CSV log with a header row and derive battery power in kW."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(f"{path}: empty file")
        cols = (schema.time, schema.speed, schema.volt, schema.amp)
        missing = [c for c in cols if c not in reader.fieldnames]
        if missing:
            raise ParseError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                vals = [float(rec[c]) for c in cols]
            except (TypeError, ValueError):
                raise ParseError(f"{path}: row {lineno}: unparseable value") from None
            if not all(np.isfinite(vals)):
                raise ParseError(f"{path}: row {lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    data = np.array(rows)
    t, v, volt, amp = data.T
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if bad.size:
        raise ParseError(f"{path}: row {bad[0] + 3}: time is not strictly increasing")
    if schema.speed_unit == "kph":
        v = v * KPH_TO_MPS
    if schema.current_sign == "discharge_negative":
        amp = -amp
    return DriveLog(t=t, v=v, volt=volt, amp=amp, p_bat=volt * amp / 1000.0, fs=_infer_fs(t))


def write_log(drive_log: DriveLog, path, schema: LogSchema = LogSchema()):
    """Write a log in the CSV layout :func:`load_log` reads."""
    v = drive_log.v / KPH_TO_MPS if schema.speed_unit == "kph" else drive_log.v
    amp = -drive_log.amp if schema.current_sign == "discharge_negative" else drive_log.amp
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([schema.time, schema.speed, schema.volt, schema.amp])
        for row in zip(drive_log.t, v, drive_log.volt, amp):
            w.writerow([repr(float(x)) for x in row])
    os.replace(tmp, path)


def kinematics(drive_log: DriveLog, sg: SGConfig | None = None):
    """Smoothed speed (clipped at zero) and SG-derivative acceleration."""
    sg = sg or SGConfig.for_rate(drive_log.fs)
    if abs(sg.fs - drive_log.fs) > 1e-9 * drive_log.fs:
        sg = replace(sg, fs=drive_log.fs)
    v = np.maximum(sg_smooth(drive_log.v, sg), 0.0)
    a = sg_derivative(drive_log.v, sg)
    return v, a


@dataclass
class Scaler:
    """Per-channel z-score for the (speed, acceleration) inputs."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, v, a):
        x = np.stack([np.ravel(v), np.ravel(a)])
        return cls(mean=x.mean(axis=1), std=np.maximum(x.std(axis=1), STD_FLOOR))

    def apply(self, v, a):
        return (v - self.mean[0]) / self.std[0], (a - self.mean[1]) / self.std[1]

    def invert(self, v_n, a_n):
        return v_n * self.std[0] + self.mean[0], a_n * self.std[1] + self.mean[1]

    def to_dict(self):
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=np.asarray(d["mean"], dtype=float), std=np.asarray(d["std"], dtype=float))


def positional_grid(L):
    return np.linspace(0.0, 1.0, L)


@dataclass
class WindowSet:
    v_raw: np.ndarray
    a_raw: np.ndarray
    p: np.ndarray
    v_n: np.ndarray
    a_n: np.ndarray
    xi: np.ndarray
    L: int
    stride: int
    starts: np.ndarray
    scaler: Scaler
    fs: float = 10.0
    n_samples: int = field(default=0)

    def __len__(self):
        return self.v_raw.shape[0]

    def subset(self, idx):
        return replace(self, v_raw=self.v_raw[idx], a_raw=self.a_raw[idx], p=self.p[idx],
                       v_n=self.v_n[idx], a_n=self.a_n[idx], starts=self.starts[idx])


def window_starts(n, L, stride, gaps=None):
    """Start indices of full windows; windows spanning a timing gap are skipped."""
    if n < L:
        raise LengthError(f"log of {n} samples is shorter than the window length {L}")
    starts = np.arange(0, n - L + 1, stride)
    if gaps is not None and np.any(gaps):
        bad = np.concatenate([[0], np.cumsum(gaps)])
        keep = bad[starts + L - 1] == bad[starts]
        dropped = int((~keep).sum())
        if dropped:
            log.warning("dropping %d window(s) that cross a sampling gap", dropped)
        starts = starts[keep]
    return starts


def make_windows(drive_log: DriveLog, L=128, stride=32, scaler: Scaler | None = None,
                 sg: SGConfig | None = None):
    """Cut a log into ``floor((N - L) / stride) + 1`` windows.

    Without a ``scaler`` one is fitted on these windows, which is only right for
    the training split.
    """
    if L < 2 or stride < 1:
        raise ConfigError("window length must be >= 2 and stride >= 1")
    starts = window_starts(len(drive_log), L, stride, drive_log.gaps())
    v, a = kinematics(drive_log, sg)
    idx = starts[:, None] + np.arange(L)[None, :]
    v_raw, a_raw, p = v[idx], a[idx], drive_log.p_bat[idx]
    if scaler is None:
        scaler = Scaler.fit(v_raw, a_raw)
    v_n, a_n = scaler.apply(v_raw, a_raw)
    return WindowSet(v_raw=v_raw, a_raw=a_raw, p=p, v_n=v_n, a_n=a_n, xi=positional_grid(L), L=L,
                     stride=stride, starts=starts, scaler=scaler, fs=drive_log.fs,
                     n_samples=len(drive_log))


def split_chronological(drive_log: DriveLog, frac_train=0.8, L=128):
    """Contiguous prefix/suffix split; both parts must hold a full window."""
    if not 0.0 < frac_train < 1.0:
        raise ConfigError(f"frac_train must be in (0, 1), got {frac_train}")
    n = len(drive_log)
    cut = int(round(frac_train * n))
    if cut < L or n - cut < L:
        raise ConfigError(f"split at {cut}/{n - cut} samples leaves a side shorter than L={L}")
    return drive_log.slice(0, cut), drive_log.slice(cut, n)


def build_datasets(drive_log: DriveLog, L=128, stride=32, frac_train=0.8, sg: SGConfig | None = None):
    """Train/validation windows with the scaler fitted on the training prefix."""
    train_log, val_log = split_chronological(drive_log, frac_train, L)
    train = make_windows(train_log, L, stride, sg=sg)
    val = make_windows(val_log, L, stride, scaler=train.scaler, sg=sg)
    return train, val
