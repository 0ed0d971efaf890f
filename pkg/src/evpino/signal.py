"""Savitzky-Golay smoothing/differentiation and band-limited resampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, LengthError


def default_window(fs, seconds=1.1):
    """Samples spanning ``seconds`` at rate ``fs``, forced odd (11 at 10 Hz)."""
    w = int(math.floor(seconds * fs + 0.5))
    return w if w % 2 else w + 1


@dataclass(frozen=True)
class SGConfig:
    window: int = 11
    order: int = 3
    fs: float = 10.0

    def __post_init__(self):
        if self.window % 2 == 0:
            raise ConfigError(f"SG window must be odd, got {self.window}")
        if self.order < 0 or self.order >= self.window:
            raise ConfigError(f"SG order {self.order} must be < window {self.window}")
        if self.window < self.order + 2:
            raise ConfigError("SG window must be at least order + 2")
        if not self.fs > 0:
            raise ConfigError("sample rate must be positive")

    @classmethod
    def for_rate(cls, fs, order=3, seconds=1.1):
        return cls(window=max(default_window(fs, seconds), order + 2 + (order + 1) % 2), order=order, fs=fs)

    @property
    def half(self):
        return self.window // 2


def _fit_weights(offsets, order, deriv, at=0.0):
    """Weights ``w`` with ``w @ x[offsets]`` = d-th derivative at ``at`` of the LS polynomial."""
    offsets = np.asarray(offsets, dtype=float)
    A = np.vander(offsets - at, order + 1, increasing=True)
    # row ``deriv`` of the pseudo-inverse gives the coefficient of (t-at)^deriv
    return math.factorial(deriv) * np.linalg.pinv(A)[deriv]


def sg_coefficients(cfg: SGConfig, deriv=0):
    """Centred SG weights of length ``cfg.window``, ordered for a dot product.

    ``deriv=1`` weights include the ``fs`` factor, so they return per-second
    derivatives.
    """
    if deriv not in (0, 1) or deriv > cfg.order:
        raise ConfigError(f"unsupported derivative order {deriv} for polynomial order {cfg.order}")
    m = cfg.half
    w = _fit_weights(np.arange(-m, m + 1), cfg.order, deriv)
    return w * cfg.fs ** deriv


def _apply(x, cfg, deriv):
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < cfg.window:
        raise LengthError(f"series of {n} samples is shorter than the SG window {cfg.window}")
    m = cfg.half
    w = sg_coefficients(cfg, deriv)
    out = np.empty(n)
    out[m:n - m] = np.correlate(x, w, mode="valid")
    scale = cfg.fs ** deriv
    need = cfg.order + 1
    for i in list(range(m)) + list(range(n - m, n)):
        lo, hi = max(0, i - m), min(n, i + m + 1)
        # a truncated window may be too short to determine the polynomial
        if hi - lo < need:
            if lo == 0:
                hi = need
            else:
                lo = n - need
        idx = np.arange(lo, hi)
        out[i] = scale * _fit_weights(idx, cfg.order, deriv, at=i) @ x[lo:hi]
    return out


def sg_smooth(x, cfg: SGConfig):
    """Least-squares polynomial smoothing; edges use a refit on the truncated window."""
    return _apply(x, cfg, 0)


def sg_derivative(x, cfg: SGConfig):
    """Analytic first derivative (per second) of the local SG polynomial."""
    return _apply(x, cfg, 1)


def resample(x, fs_in, fs_out, max_denominator=1000):
    """Band-limited resampling from ``fs_in`` to ``fs_out`` Hz.

    Output sample ``j`` sits at time ``j / fs_out`` relative to the first input
    sample; samples past the last input time are dropped. Uses a Kaiser
    windowed-sinc polyphase filter, so only the first and last few dozen output
    samples feel the edges.
    """
    if not (fs_in > 0 and fs_out > 0):
        raise ConfigError("sample rates must be positive")
    x = np.asarray(x, dtype=float)
    if fs_in == fs_out:
        return x.copy()
    ratio = Fraction(fs_out / fs_in).limit_denominator(max_denominator)
    up, down = ratio.numerator, ratio.denominator
    half_len = 10 * max(up, down)
    h = sps.firwin(2 * half_len + 1, 1.0 / max(up, down), window=("kaiser", 14.0))
    # unit DC gain per polyphase branch (resample_poly rescales by ``up``)
    for phase in range(up):
        h[phase::up] /= up * h[phase::up].sum()
    y = sps.resample_poly(x, up, down, window=h, padtype="line")
    n_out = int(math.floor((x.size - 1) * up / down + 1e-9)) + 1
    return y[:n_out]


def sg_cutoff(cfg: SGConfig):
    """Rough low-pass corner ``fs / window`` (Hz) of the smoother."""
    return cfg.fs / cfg.window


def mode_bound(cfg: SGConfig, L):
    """Spectral modes needed to keep the smoothed band in an ``L``-sample window.

    Returns ``(bound, modes)``: the real-valued ``f_c / (fs / L) + 1`` (the
    extra mode is the DC bin) and its ceiling.
    """
    if L < 2:
        raise ConfigError("window length must be at least 2")
    bound = sg_cutoff(cfg) / (cfg.fs / L) + 1.0
    return bound, math.ceil(bound - 1e-9)
