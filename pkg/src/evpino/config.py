"""TOML run configuration shared by every command-line entry point.

Sections: ``[vehicle]``, ``[operator]``, ``[training]`` (with
``[training.loss_weights]``), ``[data]``, ``[sg]``, ``[synth]`` (with
``[synth.cycle]``) and a top-level ``seed``. Every section is optional.
"""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields

from .dataset import LogSchema
from .errors import ConfigError
from .operator import OperatorConfig
from .physics import VehicleSpec
from .signal import SGConfig
from .synth import CycleSpec, SynthConfig
from .training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SECTIONS = ("vehicle", "operator", "training", "data", "sg", "synth", "seed")


@dataclass(frozen=True)
class DataConfig:
    """Log location, CSV column mapping and windowing of the training data."""

    log: str | None = None
    time: str = "t"
    speed: str = "v"
    volt: str = "volt"
    amp: str = "amp"
    speed_unit: str = "mps"
    current_sign: str = "discharge_positive"
    frac_train: float = 0.8
    stride: int = 32

    def __post_init__(self):
        if not 0.0 < self.frac_train < 1.0:
            raise ConfigError("data.frac_train must lie in (0, 1)")
        if self.stride < 1:
            raise ConfigError("data.stride must be at least 1")
        self.schema()

    def schema(self):
        return LogSchema(time=self.time, speed=self.speed, volt=self.volt, amp=self.amp,
                         speed_unit=self.speed_unit, current_sign=self.current_sign)


@dataclass(frozen=True)
class SGSection:
    """Filter window and order; ``window = 0`` picks the 1.1 s default for the log's rate."""

    window: int = 0
    order: int = 3

    def for_rate(self, fs):
        if self.window == 0:
            return SGConfig.for_rate(fs, order=self.order)
        return SGConfig(window=self.window, order=self.order, fs=fs)


@dataclass
class RunConfig:
    vehicle: VehicleSpec = field(default_factory=VehicleSpec)
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sg: SGSection = field(default_factory=SGSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0

    def __post_init__(self):
        self.check()

    def check(self):
        """Cross-section rules, enforced before any data is touched."""
        vc, mode = self.operator.var_channels, self.vehicle.paux_mode
        if (vc == 3) != (mode == "variable"):
            raise ConfigError(f"operator.var_channels = {vc} does not match vehicle.paux_mode = {mode!r}: "
                              "a variable auxiliary load needs exactly three variable channels")
        if self.data.stride > self.operator.window:
            raise ConfigError(f"data.stride = {self.data.stride} exceeds operator.window = "
                              f"{self.operator.window}, so some samples would never be predicted")
        n_synth = int(round(self.synth.duration * self.synth.fs))
        if n_synth < 2 * self.operator.window:
            raise ConfigError(f"synth.duration gives {n_synth} samples, fewer than two windows of "
                              f"{self.operator.window}")
        # fail early on an SG section that is invalid at any rate
        self.sg.for_rate(self.synth.fs)
        if self.data.log is not None and not os.path.isfile(self.data.log):
            raise ConfigError(f"data.log: file {self.data.log!r} does not exist")

    def sg_for(self, fs):
        return self.sg.for_rate(fs)

    def to_dict(self):
        d = {"vehicle": self.vehicle.to_dict(), "operator": asdict(self.operator),
             "training": self.training.to_dict(), "data": asdict(self.data), "sg": asdict(self.sg),
             "synth": self.synth.to_dict(), "seed": self.seed}
        return d

    @classmethod
    def from_dict(cls, d, base_dir=None):
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, builder in (("vehicle", VehicleSpec.from_dict), ("operator", OperatorConfig.from_dict),
                              ("training", TrainConfig.from_dict), ("data", _data_from_dict),
                              ("sg", _section(SGSection, "sg")), ("synth", _synth_from_dict)):
            if name in d:
                section = d[name]
                if not isinstance(section, dict):
                    raise ConfigError(f"{name} must be a table")
                try:
                    kwargs[name] = builder(section)
                except TypeError as exc:
                    raise ConfigError(f"{name}: {exc}") from None
        if "seed" in d:
            if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
                raise ConfigError("seed must be an integer")
            kwargs["seed"] = d["seed"]
        if base_dir is not None and "data" in kwargs and kwargs["data"].log is not None:
            log_path = kwargs["data"].log
            if not os.path.isabs(log_path):
                kwargs["data"] = _replace(kwargs["data"], log=os.path.join(base_dir, log_path))
        return cls(**kwargs)


def _replace(obj, **changes):
    return type(obj)(**{**asdict(obj), **changes})


def _section(cls, name):
    def build(d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown {name} key(s): {', '.join(sorted(unknown))}")
        return cls(**d)
    return build


_data_from_dict = _section(DataConfig, "data")


def _synth_from_dict(d):
    d = dict(d)
    if "cycle" in d:
        d["cycle"] = _section(CycleSpec, "synth.cycle")(d["cycle"])
    return SynthConfig.from_dict(d)


def load_config(path=None):
    """Parse a TOML file into a validated :class:`RunConfig` (defaults when ``path`` is None)."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))
