"""Benchmark run configuration: a YAML tree mapped onto nested dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .model import CellConfig
from .protocols import ChargePulseConfig, DriveConfig, GittConfig, GittOcvConfig
from .synth import SensorModel

ENV_OUTPUT_DIR = "ESCSOC_OUTPUT_DIR"
ENV_THREADS = "ESCSOC_THREADS"

MODELS = ("ECM", "ECM-opt", "ECMh", "ECMh-opt")
SCHEME_NAMES = ("coulomb", "constant_ekf", "adaptive_ekf")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


@dataclass
class TruthSettings:
    m_peak: float = 0.008           # peak hysteresis overpotential of the truth cells (V)
    gamma: float = 100.0
    spread: float = 0.02            # relative cell-to-cell sd of each parameter
    q_spread: float = 0.0           # relative cell-to-cell sd of capacity


@dataclass
class ProtocolSettings:
    gitt: GittConfig = field(default_factory=GittConfig)
    gitt_ocv: GittOcvConfig = field(default_factory=GittOcvConfig)
    charge_pulse: ChargePulseConfig = field(default_factory=ChargePulseConfig)
    drive: DriveConfig = field(default_factory=lambda: DriveConfig(blocks=9, trailing_rest=True,
                                                                   lead_rest_minutes=10.0))
    drive_trace: str | None = None      # CSV with one power column (W) at the run dt; None = bundled stand-in
    drive_trace_seed: int = 11
    validation_trace_seed: int = 23


@dataclass
class IdentSettings:
    gamma0: float = 50.0            # fixed rate used while fitting ECMh by OLS
    tau1: float = 2.0
    tau2: float = 50.0
    gamma_tol: float = 1.0
    max_gamma_evals: int = 40
    sweep_tol: float = 1e-7


@dataclass
class EkfSettings:
    sigma0: list = field(default_factory=lambda: [1e-4, 1e-2, 1e-2, 1e-2])     # diagonal of the initial covariance
    init_rest_seconds: float = 600.0    # averaged lead-rest voltage used to invert the OCV for x0
    variance_floor_rel: float = 0.01


@dataclass
class RunConfig:
    seed: int
    n_cells: int = 3
    cell: CellConfig = field(default_factory=lambda: CellConfig(dt=1.0))     # dt applies to every protocol
    truth: TruthSettings = field(default_factory=TruthSettings)
    ident_sensors: SensorModel = field(default_factory=lambda: SensorModel(0.001, 0.0, 0.0))
    drive_sensors: SensorModel = field(default_factory=lambda: SensorModel(0.001, 0.0, 0.010))
    protocols: ProtocolSettings = field(default_factory=ProtocolSettings)
    ident: IdentSettings = field(default_factory=IdentSettings)
    ekf: EkfSettings = field(default_factory=EkfSettings)
    models: list = field(default_factory=lambda: list(MODELS))
    schemes: list = field(default_factory=lambda: list(SCHEME_NAMES))
    output_dir: str = "socbench_out"
    workers: int = 1

    def validate(self, base_dir=None):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if self.n_cells < 1:
            raise ConfigError("n_cells must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        bad = [m for m in self.models if m not in MODELS]
        if bad or not self.models:
            raise ConfigError(f"unknown models {bad}; choose from {list(MODELS)}")
        bad = [s for s in self.schemes if s not in SCHEME_NAMES]
        if bad or not self.schemes:
            raise ConfigError(f"unknown schemes {bad}; choose from {list(SCHEME_NAMES)}")
        if len(self.ekf.sigma0) != 4 or min(self.ekf.sigma0) < 0:
            raise ConfigError("ekf.sigma0 must list four non-negative variances")
        trace = self.protocols.drive_trace
        if trace is not None:
            p = Path(trace)
            if not p.is_absolute() and base_dir is not None:
                p = Path(base_dir) / p
            if not p.is_file():
                raise ConfigError(f"drive trace {trace!r} does not exist")
            self.protocols.drive_trace = str(p)
        return self

    def to_dict(self):
        return _plain(self)

    def content_hash(self):
        """sha256 of the settings that determine results (output location and worker count excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    return obj


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kw = {}
    for name, value in data.items():
        kw[name] = _convert(hints[name], value, f"{where}.{name}" if where else name)
    missing = [n for n, f in names.items() if n not in kw and f.default is dataclasses.MISSING
               and f.default_factory is dataclasses.MISSING]
    if missing:
        raise ConfigError(f"{where or 'config'}: missing required keys {missing}")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _convert(tp, value, where):
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp in (float, int):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if tp is bool and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if tp is list and not isinstance(value, list):
        raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def build_dataclass(cls, data, where=""):
    """Build ``cls`` from a nested mapping, rejecting unknown keys and wrong types."""
    return _build(cls, data, where)


def config_from_dict(data, base_dir=None) -> RunConfig:
    if not isinstance(data, dict) or "seed" not in data:
        raise ConfigError("config must set 'seed' (required for reproducibility)")
    cfg = _build(RunConfig, data, "")
    return cfg.validate(base_dir)


def load_config(path=None, overrides=None, env=None) -> RunConfig:
    """Read a YAML config, apply ``overrides`` (a nested dict) and environment overrides."""
    data = {}
    base = None
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        base = Path(path).parent
    data = _merge(data, overrides or {})
    env = os.environ if env is None else env
    if env.get(ENV_OUTPUT_DIR):
        data["output_dir"] = env[ENV_OUTPUT_DIR]
    if env.get(ENV_THREADS):
        try:
            data["workers"] = int(env[ENV_THREADS])
        except ValueError:
            raise ConfigError(f"{ENV_THREADS} must be an integer") from None
    return config_from_dict(data, base)


def _merge(a, b):
    out = dict(a) if isinstance(a, dict) else {}
    for k, v in b.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) else v
    return out
