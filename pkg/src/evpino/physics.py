"""Differentiable longitudinal power model of an electric vehicle on flat ground.

All functions accept numpy arrays or :class:`~evpino.numerics.Tensor` objects
and return Tensors so they can sit inside a training graph. Power is in watts
here; callers convert to kW at the boundary.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DomainError

#: order of the six baseline scalars everywhere in the package
BASELINE_NAMES = ("cd", "crr", "mass", "paux", "eta", "mu")

PAUX_MODES = ("static", "variable")


def _pair(x):
    lo, hi = (float(v) for v in x)
    return (lo, hi)


@dataclass
class VehicleSpec:
    """Fixed constants, parameter bounds and gating hyperparameters of one vehicle.

    Bounds are ``(lo, hi)`` pairs. ``paux_bounds`` and ``span_paux`` are in
    watts. ``frontal_area`` is not identifiable from logs; the recovered drag
    coefficient is only meaningful relative to it.
    """

    frontal_area: float = 2.2
    rho: float = 1.225
    g: float = 9.81
    cd_bounds: tuple = (0.20, 0.30)
    crr_bounds: tuple = (0.005, 0.015)
    mass_bounds: tuple = (1500.0, 2500.0)
    paux_bounds: tuple = (0.0, 3000.0)
    eta_bounds: tuple = (0.60, 0.95)
    mu_bounds: tuple = (0.40, 0.90)
    v0: float = 18.0
    s_v: float = 2.0
    span_eta: float = 0.05
    span_mu: float = 0.05
    span_paux: float = 500.0
    head_temperature: float = 1.0
    paux_mode: str = "static"

    def __post_init__(self):
        for name in BASELINE_NAMES:
            key = f"{name}_bounds"
            lo, hi = _pair(getattr(self, key))
            setattr(self, key, (lo, hi))
            if not lo < hi:
                raise ConfigError(f"{key}: lower bound {lo} must be below upper bound {hi}")
        for key in ("eta_bounds", "mu_bounds"):
            lo, hi = getattr(self, key)
            if lo <= 0 or hi > 1:
                raise ConfigError(f"{key} must lie inside (0, 1]")
        for key in ("frontal_area", "rho", "g", "s_v", "head_temperature"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("span_eta", "span_mu", "span_paux"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        if self.paux_mode not in PAUX_MODES:
            raise ConfigError(f"paux_mode must be one of {PAUX_MODES}, got {self.paux_mode!r}")

    def bounds(self, name):
        return getattr(self, f"{name}_bounds")

    def midpoints(self):
        return {n: 0.5 * sum(self.bounds(n)) for n in BASELINE_NAMES}

    def to_dict(self):
        d = asdict(self)
        for name in BASELINE_NAMES:
            d[f"{name}_bounds"] = list(d[f"{name}_bounds"])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown vehicle key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class ParamTrace:
    """Bounded physical parameters for one batch of windows.

    Scalars are 0-d Tensors; ``eta``, ``mu`` and ``paux`` are ``(B, L)``
    Tensors (``paux`` is a broadcast of ``paux0`` in static mode). The raw
    offsets ``d_eta``/``d_mu`` in [-1, 1] are kept for the smoothness prior.
    """

    cd: nx.Tensor
    crr: nx.Tensor
    mass: nx.Tensor
    paux0: nx.Tensor
    eta0: nx.Tensor
    mu0: nx.Tensor
    eta: nx.Tensor
    mu: nx.Tensor
    paux: nx.Tensor
    d_eta: nx.Tensor = field(default=None)
    d_mu: nx.Tensor = field(default=None)
    d_paux: nx.Tensor = field(default=None)

    def scalars(self):
        return {"cd": self.cd.item(), "crr": self.crr.item(), "mass": self.mass.item(),
                "paux": self.paux0.item(), "eta": self.eta0.item(), "mu": self.mu0.item()}


def mech_power(v, a, cd, crr, mass, spec: VehicleSpec):
    """Wheel-side mechanical power in watts: drag + rolling + inertial terms."""
    v, a = nx.as_tensor(v), nx.as_tensor(a)
    if np.any(v.data < 0):
        raise DomainError("speed must be non-negative")
    drag = (0.5 * spec.rho * spec.frontal_area) * nx.as_tensor(cd) * (v * v * v)
    rolling = nx.as_tensor(crr) * nx.as_tensor(mass) * (spec.g * v)
    inertial = nx.as_tensor(mass) * (a * v)
    return drag + rolling + inertial


def battery_power(p_mech, a, eta, mu, paux):
    """Battery power in watts from mechanical power.

    Traction draw is ``relu(P_m) / eta``; while decelerating, a fraction ``mu``
    of the negative mechanical power flows back and lowers the draw. ``paux``
    adds on top.
    """
    p_mech, eta, mu = nx.as_tensor(p_mech), nx.as_tensor(eta), nx.as_tensor(mu)
    if np.any(eta.data <= 0):
        raise DomainError("motor efficiency must be positive")
    braking = (np.asarray(nx.as_tensor(a).data) < 0).astype(float)
    traction = nx.relu(p_mech) / eta
    regen = mu * nx.relu(-p_mech) * braking
    return traction - regen + paux


def bound(x, lo, hi):
    """Map an unconstrained value into ``(lo, hi)`` with a sigmoid."""
    if not lo < hi:
        raise ConfigError(f"bound requires lo < hi, got ({lo}, {hi})")
    return lo + (hi - lo) * nx.sigmoid(x)


def unbound(value, lo, hi):
    """Inverse of :func:`bound` for a value strictly inside ``(lo, hi)``."""
    u = (np.asarray(value, dtype=float) - lo) / (hi - lo)
    if np.any((u <= 0) | (u >= 1)):
        raise DomainError(f"{value} is not strictly inside ({lo}, {hi})")
    return np.log(u) - np.log1p(-u)


def gate(v, v0, s_v):
    """Speed gate ``sigmoid((v - v0) / s_v)``: ~0 at low speed, ~1 above ``v0``."""
    if not s_v > 0:
        raise ConfigError("gate slope must be positive")
    return nx.sigmoid((nx.as_tensor(v) - v0) * (1.0 / s_v))


def assemble_time_varying(base, delta, span, w, lo, hi):
    """``clip(base + span * w * delta, lo, hi)`` with a hard clamp."""
    return nx.clip(base + span * (nx.as_tensor(w) * delta), lo, hi)


def predict_power_kw(v, a, trace: ParamTrace, spec: VehicleSpec):
    """Physics-only battery power in kW for raw speed/acceleration and a trace."""
    p_m = mech_power(v, a, trace.cd, trace.crr, trace.mass, spec)
    return battery_power(p_m, a, trace.eta, trace.mu, trace.paux) * 1e-3
