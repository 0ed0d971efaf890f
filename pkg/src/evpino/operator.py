"""Spectral parameter operator: lift, residual Fourier blocks and output heads.

Tensor layout inside the trunk is ``(batch, time, channels)``. The forward
pass ends in the differentiable physics model, so the network output is a
battery power trace in kW plus the bounded parameters that produced it.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .errors import CheckpointVersionError, ConfigError, ShapeError
from .physics import (BASELINE_NAMES, ParamTrace, VehicleSpec, assemble_time_varying,
                      battery_power, bound, gate, mech_power)


@dataclass(frozen=True)
class OperatorConfig:
    n_modes: int = 4
    width: int = 128
    n_layers: int = 4
    lift_hidden: int = 256
    var_channels: int = 2
    window: int = 128

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"operator.{f.name} must be positive")
        if self.var_channels not in (2, 3):
            raise ConfigError("operator.var_channels must be 2 or 3")
        if self.n_modes > self.window // 2 + 1:
            raise ConfigError(f"operator.n_modes={self.n_modes} exceeds {self.window // 2 + 1} "
                              f"available bins for window {self.window}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown operator key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def count_params(cfg: OperatorConfig, by_component=False):
    """Closed-form trainable parameter count of :class:`OperatorModel`."""
    H, W, m, n = cfg.lift_hidden, cfg.width, cfg.n_modes, cfg.n_layers
    parts = {
        "lift": (3 * H + H) + (H * W + W),
        "spectral": n * 2 * m * W * W,
        "pointwise": n * 2 * (W * W + W),
        "buffer_head": W + 1,
        "var_head": (W + 1) * cfg.var_channels,
        "baselines": len(BASELINE_NAMES),
    }
    total = sum(parts.values())
    return (total, parts) if by_component else total


def _component(name):
    if name.startswith("lift."):
        return "lift"
    if name.startswith("blocks."):
        return "spectral" if name.endswith(".spectral") else "pointwise"
    return name.split(".")[0]


class OperatorModel:
    """Trainable surrogate holding named :class:`~evpino.numerics.Parameter` objects."""

    def __init__(self, cfg: OperatorConfig = OperatorConfig(), seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        H, W, m, vc = cfg.lift_hidden, cfg.width, cfg.n_modes, cfg.var_channels
        params = []

        def uniform(name, shape, fan_in):
            k = 1.0 / np.sqrt(fan_in)
            params.append(nx.Parameter(name, rng.uniform(-k, k, size=shape)))

        uniform("lift.w1", (3, H), 3)
        uniform("lift.b1", (H,), 3)
        uniform("lift.w2", (H, W), H)
        uniform("lift.b2", (W,), H)
        for i in range(cfg.n_layers):
            scale = 1.0 / (W * W)
            params.append(nx.Parameter(f"blocks.{i}.spectral", scale * rng.random((m, W, W, 2))))
            uniform(f"blocks.{i}.w1", (W, W), W)
            uniform(f"blocks.{i}.b1", (W,), W)
            uniform(f"blocks.{i}.w2", (W, W), W)
            uniform(f"blocks.{i}.b2", (W,), W)
        # zero heads: at init the model is pure physics at the bound midpoints
        params.append(nx.Parameter("var_head.w", np.zeros((W, vc))))
        params.append(nx.Parameter("var_head.b", np.zeros(vc)))
        params.append(nx.Parameter("buffer_head.w", np.zeros((W, 1))))
        params.append(nx.Parameter("buffer_head.b", np.zeros(1)))
        params.append(nx.Parameter("baselines", np.zeros(len(BASELINE_NAMES))))
        self.params = {p.name: p for p in params}

    # ---------------------------------------------------------------- params
    def parameters(self):
        return list(self.params.values())

    def __getitem__(self, name):
        return self.params[name]

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def component_counts(self):
        counts = {}
        for name, p in self.params.items():
            key = _component(name)
            counts[key] = counts.get(key, 0) + p.size
        return counts

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        if missing:
            raise ShapeError(f"state is missing {sorted(missing)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=float)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data[...] = arr

    def set_trainable(self, names=None):
        """Make only ``names`` trainable (all parameters when ``None``)."""
        for name, p in self.params.items():
            p.trainable = names is None or name in names

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # ---------------------------------------------------------------- trunk
    def lift(self, v_n, a_n, xi):
        v_n, a_n = np.asarray(v_n, dtype=float), np.asarray(a_n, dtype=float)
        if v_n.shape != a_n.shape or v_n.ndim != 2:
            raise ShapeError(f"lift expects matching (B, L) inputs, got {v_n.shape} and {a_n.shape}")
        xi = np.broadcast_to(np.asarray(xi, dtype=float), v_n.shape)
        x = nx.Tensor(np.stack([v_n, a_n, xi], axis=-1))
        p = self.params
        h = nx.gelu(nx.affine(x, p["lift.w1"], p["lift.b1"]))
        return nx.affine(h, p["lift.w2"], p["lift.b2"])

    def spectral_conv(self, x, i):
        """Truncated-spectrum channel mixing along the time axis of ``x``."""
        L = x.shape[1]
        m = self.cfg.n_modes
        nb = nx.n_bins(L)
        if m > nb:
            raise ShapeError(f"{m} modes requested but a length-{L} window has {nb} bins")
        X = nx.rfft_modes(x, m)
        Y = nx.mode_mix(X, self.params[f"blocks.{i}.spectral"])
        return nx.irfft_modes(Y, L)

    def block(self, x, i):
        p = self.params
        mlp = nx.affine(nx.gelu(nx.affine(x, p[f"blocks.{i}.w1"], p[f"blocks.{i}.b1"])),
                        p[f"blocks.{i}.w2"], p[f"blocks.{i}.b2"])
        return x + nx.gelu(self.spectral_conv(x, i) + mlp)

    def features(self, v_n, a_n, xi):
        h = self.lift(v_n, a_n, xi)
        for i in range(self.cfg.n_layers):
            h = self.block(h, i)
        return h

    # ---------------------------------------------------------------- heads
    def baselines(self, spec: VehicleSpec):
        raw = self.params["baselines"]
        return {name: bound(raw[k], *spec.bounds(name)) for k, name in enumerate(BASELINE_NAMES)}

    def heads(self, Z, v_raw, a_raw, spec: VehicleSpec):
        """Parameter trace, residual power (kW) and predicted power (kW) from features."""
        vc = self.cfg.var_channels
        if vc == 3 and spec.paux_mode != "variable":
            raise ConfigError("three variable channels need paux_mode = 'variable'")
        if vc == 2 and spec.paux_mode == "variable":
            raise ConfigError("paux_mode = 'variable' needs operator.var_channels = 3")
        p = self.params
        delta = nx.tanh(nx.affine(Z, p["var_head.w"], p["var_head.b"]) * (1.0 / spec.head_temperature))
        w = gate(v_raw, spec.v0, spec.s_v).data
        base = self.baselines(spec)
        d_eta, d_mu = delta[..., 0], delta[..., 1]
        eta = assemble_time_varying(base["eta"], d_eta, spec.span_eta, w, *spec.eta_bounds)
        mu = assemble_time_varying(base["mu"], d_mu, spec.span_mu, w, *spec.mu_bounds)
        d_paux = None
        if vc == 3:
            d_paux = delta[..., 2]
            paux = assemble_time_varying(base["paux"], d_paux, spec.span_paux, w, *spec.paux_bounds)
        else:
            paux = base["paux"] * np.ones(np.shape(v_raw))
        trace = ParamTrace(cd=base["cd"], crr=base["crr"], mass=base["mass"], paux0=base["paux"],
                           eta0=base["eta"], mu0=base["mu"], eta=eta, mu=mu, paux=paux,
                           d_eta=d_eta, d_mu=d_mu, d_paux=d_paux)
        p_res = nx.affine(Z, p["buffer_head.w"], p["buffer_head.b"])[..., 0]
        p_m = mech_power(v_raw, a_raw, trace.cd, trace.crr, trace.mass, spec)
        p_pred = battery_power(p_m, a_raw, eta, mu, paux) * 1e-3 + p_res
        return trace, p_res, p_pred

    def forward(self, windows, spec: VehicleSpec):
        """Run the full model on a :class:`~evpino.dataset.WindowSet`-like object.

        Any window length with at least ``n_modes`` rfft bins is accepted; the
        spectral weights are shared across lengths.
        """
        Z = self.features(windows.v_n, windows.a_n, windows.xi)
        return self.heads(Z, windows.v_raw, windows.a_raw, spec)

    __call__ = forward


# ------------------------------------------------------------------ checkpoints
CHECKPOINT_MAGIC = b"EVPINOCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: OperatorModel, meta=None):
    """Write ``model`` and JSON-serialisable ``meta`` atomically.

    Layout (little endian): 8-byte magic, uint32 version, uint32 header length,
    UTF-8 JSON header, uint32 record count, then per tensor: uint16 name
    length, name, uint8 ndim, ndim x uint32 extents, float64 data (C order).
    """
    header = {"operator": asdict(model.cfg), "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Return ``(header, tensors)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise CheckpointVersionError(f"{path}: not an evpino checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"{path}: checkpoint version {version}, "
                                         f"this build reads version {CHECKPOINT_VERSION}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape).astype(float)
    return header, tensors


def load_checkpoint(path, expect: OperatorConfig | None = None):
    """Rebuild the model stored at ``path``; returns ``(model, meta)``.

    With ``expect`` given, window length, width and mode count must match.
    """
    header, tensors = read_checkpoint(path)
    cfg = OperatorConfig.from_dict(header["operator"])
    if expect is not None:
        for key in ("window", "width", "n_modes"):
            if getattr(cfg, key) != getattr(expect, key):
                raise CheckpointVersionError(f"{path}: checkpoint {key}={getattr(cfg, key)} "
                                             f"but {getattr(expect, key)} was requested")
    model = OperatorModel(cfg)
    model.load_state_dict(tensors)
    return model, header.get("meta", {})
