"""Synthetic drive logs from known parameters, plus a brute-force power oracle.

The oracle below is a straight scalar loop written without touching
:mod:`evpino.physics`, so the two can check each other.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dataset import DriveLog
from .errors import ConfigError

SYNTH_VOLTAGE = 360.0


@dataclass
class CycleSpec:
    """Speed profile: ``base`` plus sinusoids and smooth ramps, with idle stops.

    ``sines`` holds ``(freq_hz, amplitude_mps, phase_rad)``; a ``None`` phase is
    drawn from the seeded generator. ``ramps`` holds ``(t_start, t_end,
    delta_mps)`` smoothstep transitions and ``idles`` holds ``(t_start, t_end)``
    windows where the car is brought to rest over ``idle_blend`` seconds.
    """

    base: float = 15.0
    sines: list = field(default_factory=lambda: [(30 / 600, 5.0, 0.0), (8 / 600, 4.0, 1.0),
                                                 (66 / 600, 1.5, 2.0)])
    ramps: list = field(default_factory=list)
    idles: list = field(default_factory=list)
    idle_blend: float = 8.0


@dataclass
class SynthConfig:
    cd: float = 0.23
    crr: float = 0.0096
    mass: float = 1977.0
    paux: float = 1000.0
    eta: float = 0.83
    mu: float = 0.74
    # speed-dependent motor efficiency: eta + eta_gain * sigmoid((v - eta_v0) / eta_slope)
    eta_gain: float = 0.0
    eta_v0: float = 18.0
    eta_slope: float = 2.0
    frontal_area: float = 2.2
    rho: float = 1.225
    g: float = 9.81
    fs: float = 10.0
    duration: float = 600.0
    cycle: CycleSpec = field(default_factory=CycleSpec)
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.cycle, dict):
            self.cycle = CycleSpec(**self.cycle)
        lo = self.eta + min(self.eta_gain, 0.0)
        hi = self.eta + max(self.eta_gain, 0.0)
        if not (0.0 < lo and hi <= 1.0):
            raise ConfigError("ground-truth motor efficiency must stay inside (0, 1]")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError("ground-truth regen efficiency must lie in [0, 1]")
        if not (self.fs > 0 and self.duration > 0):
            raise ConfigError("fs and duration must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def eta_at(self, v):
        return self.eta + self.eta_gain / (1.0 + math.exp(-(v - self.eta_v0) / self.eta_slope))


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u), 6.0 * u * (1.0 - u)


def gen_cycle(cfg: SynthConfig, min_samples=0):
    """Return ``(t, v, a)`` with acceleration from the analytic derivative."""
    n = int(round(cfg.duration * cfg.fs))
    if n < max(2, min_samples):
        raise ConfigError(f"cycle has {n} samples, need at least {max(2, min_samples)}")
    rng = np.random.default_rng(cfg.seed)
    t = np.arange(n) / cfg.fs
    spec = cfg.cycle
    v = np.full(n, float(spec.base))
    a = np.zeros(n)
    for freq, amp, phase in spec.sines:
        if phase is None:
            phase = rng.uniform(0.0, 2.0 * np.pi)
        w = 2.0 * np.pi * freq
        v += amp * np.sin(w * t + phase)
        a += amp * w * np.cos(w * t + phase)
    for t0, t1, dv in spec.ramps:
        s, ds = _smoothstep((t - t0) / (t1 - t0))
        v += dv * s
        a += dv * ds / (t1 - t0)
    for t0, t1 in spec.idles:
        # envelope is 1 while cruising and 0 inside the idle window
        blend = spec.idle_blend
        down, d_down = _smoothstep((t - (t0 - blend)) / blend)
        up, d_up = _smoothstep((t - t1) / blend)
        env = 1.0 - down + up
        d_env = (-d_down + d_up) / blend
        a = a * env + v * d_env
        v = v * env
    stopped = v <= 0.0
    v[stopped] = 0.0
    a[stopped] = 0.0
    if np.all(a == 0.0):
        warnings.warn("cycle spec produces a constant speed", RuntimeWarning, stacklevel=2)
    return t, v, a


def forward_oracle(v, a, cfg: SynthConfig, rng=None):
    """Battery power in kW, one sample at a time."""
    out = []
    for vi, ai in zip(v, a):
        vi, ai = float(vi), float(ai)
        aero = 0.5 * cfg.rho * cfg.frontal_area * cfg.cd * vi ** 3
        roll = cfg.crr * cfg.mass * cfg.g * vi
        inertia = cfg.mass * ai * vi
        wheel = aero + roll + inertia
        if wheel > 0.0:
            watts = wheel / cfg.eta_at(vi)
        elif ai < 0.0:
            watts = cfg.mu * wheel
        else:
            watts = 0.0
        out.append((watts + cfg.paux) / 1000.0)
    p = np.array(out)
    if cfg.noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed + 1)
        p = p + rng.normal(0.0, cfg.noise_std, size=p.size)
    return p


def gen_log(cfg: SynthConfig, min_samples=0):
    """Synthetic :class:`DriveLog` with oracle power and a fixed 360 V pack."""
    t, v, a = gen_cycle(cfg, min_samples)
    p = forward_oracle(v, a, cfg)
    volt = np.full(t.size, SYNTH_VOLTAGE)
    amp = p * 1000.0 / SYNTH_VOLTAGE
    return DriveLog(t=t, v=v, volt=volt, amp=amp, p_bat=volt * amp / 1000.0, fs=cfg.fs)
