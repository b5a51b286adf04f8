"""Load schedules for the GITT-family tests and the power-based drive cycle.

A :class:`Profile` is a pure schedule: one value per sample plus a segment
label.  Current-mode values are amperes (positive = discharge), power-mode
values are watts.  ``cv_hold`` samples carry the target voltage instead and
are interpreted closed-loop by the synthesiser.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import LABEL_CODE, LABELS, DataError
from .model import CellConfig

CURRENT = "current"
POWER = "power"


@dataclass
class Profile:
    dt: float
    mode: str
    values: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.mode not in (CURRENT, POWER):
            raise ValueError(f"unknown profile mode {self.mode!r}")
        if self.values.shape != self.labels.shape:
            raise ValueError("values and labels differ in length")

    def __len__(self):
        return self.values.size

    @property
    def time(self):
        return np.arange(len(self)) * self.dt

    @property
    def duration(self):
        return len(self) * self.dt

    def segments(self):
        """Contiguous (label, start, stop) runs."""
        lab = self.labels
        if lab.size == 0:
            return []
        edges = np.flatnonzero(np.diff(lab)) + 1
        starts = np.concatenate(([0], edges))
        stops = np.concatenate((edges, [lab.size]))
        return [(LABELS[lab[s]], int(s), int(e)) for s, e in zip(starts, stops)]

    def count(self, label):
        return sum(1 for name, _, _ in self.segments() if name == label)


class _Builder:
    def __init__(self, dt):
        self.dt = dt
        self.values = []
        self.labels = []

    def add(self, value, seconds, label):
        n = int(round(seconds / self.dt))
        if n <= 0:
            return
        self.values.append(np.full(n, float(value)))
        self.labels.append(np.full(n, LABEL_CODE[label], dtype=np.int8))

    def add_series(self, values, label):
        self.values.append(np.asarray(values, dtype=float))
        self.labels.append(np.full(len(values), LABEL_CODE[label], dtype=np.int8))

    def build(self, mode):
        if not self.values:
            return Profile(self.dt, mode, np.zeros(0), np.zeros(0, dtype=np.int8))
        return Profile(self.dt, mode, np.concatenate(self.values), np.concatenate(self.labels))


@dataclass
class ResetConfig:
    """CC-CV charge to the upper limit followed by a long rest."""

    cc_c_rate: float = 0.3
    cc_max_hours: float = 4.0
    cutoff_c_rate: float = 0.01
    cv_max_hours: float = 2.0
    rest_hours: float = 4.0


def _reset(b: _Builder, reset: ResetConfig | None, cell: CellConfig):
    if reset is None:
        return
    b.add(-reset.cc_c_rate * cell.one_c, reset.cc_max_hours * 3600, "pulse_charge")
    b.add(cell.v_max, reset.cv_max_hours * 3600, "cv_hold")
    b.add(0.0, reset.rest_hours * 3600, "rest")


def _check_step(c_rate, minutes, soc_step):
    implied = c_rate * minutes / 60.0
    if not math.isclose(implied, soc_step, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"pulse of {c_rate} C for {minutes} min moves SOC by {implied:.6g}, "
                         f"not the configured soc_step {soc_step:.6g}")
    return implied


@dataclass
class GittConfig:
    pulse_c_rate: float = 0.5
    pulse_minutes: float = 6.0
    rest_hours: float = 1.0
    soc_step: float = 0.05
    reset: ResetConfig | None = None


@dataclass
class GittOcvConfig:
    c_rate: float = 0.1
    pulse_minutes: float = 12.0
    rest_hours: float = 1.0
    soc_step: float = 0.02
    reset: ResetConfig | None = None


@dataclass
class ChargePulseConfig:
    c_rate: float = 0.5
    discharge_minutes: float = 12.0
    charge_minutes: float = 6.0
    rest_hours: float = 1.0
    blocks: int = 20
    reset: ResetConfig | None = None


@dataclass
class DriveConfig:
    block_hours: float = 1.0
    rest_hours: float = 1.0
    depth_per_block: float = 0.10
    blocks: int = 10
    nominal_voltage: float = 3.6
    trailing_rest: bool = False
    lead_rest_minutes: float = 0.0     # rest before the first block, e.g. for OCV-based initialisation
    reset: ResetConfig | None = None


def _positive(**kw):
    for k, v in kw.items():
        if not v > 0:
            raise ValueError(f"{k} must be positive, got {v!r}")


def gen_gitt(cfg: GittConfig, cell: CellConfig) -> Profile:
    _positive(pulse_c_rate=cfg.pulse_c_rate, pulse_minutes=cfg.pulse_minutes,
              rest_hours=cfg.rest_hours, soc_step=cfg.soc_step)
    _check_step(cfg.pulse_c_rate, cfg.pulse_minutes, cfg.soc_step)
    b = _Builder(cell.dt)
    _reset(b, cfg.reset, cell)
    for _ in range(int(math.floor(1.0 / cfg.soc_step + 1e-9))):
        b.add(cfg.pulse_c_rate * cell.one_c, cfg.pulse_minutes * 60, "pulse_discharge")
        b.add(0.0, cfg.rest_hours * 3600, "rest")
    return b.build(CURRENT)


def gen_gitt_ocv(cfg: GittOcvConfig, cell: CellConfig) -> Profile:
    _positive(c_rate=cfg.c_rate, pulse_minutes=cfg.pulse_minutes, rest_hours=cfg.rest_hours,
              soc_step=cfg.soc_step)
    _check_step(cfg.c_rate, cfg.pulse_minutes, cfg.soc_step)
    b = _Builder(cell.dt)
    _reset(b, cfg.reset, cell)
    n = int(math.floor(1.0 / cfg.soc_step + 1e-9))
    amp = cfg.c_rate * cell.one_c
    for sign, label in ((1.0, "pulse_discharge"), (-1.0, "pulse_charge")):
        for _ in range(n):
            b.add(sign * amp, cfg.pulse_minutes * 60, label)
            b.add(0.0, cfg.rest_hours * 3600, "rest")
    return b.build(CURRENT)


def gen_gitt_charge_pulse(cfg: ChargePulseConfig, cell: CellConfig) -> Profile:
    _positive(c_rate=cfg.c_rate, discharge_minutes=cfg.discharge_minutes,
              charge_minutes=cfg.charge_minutes, rest_hours=cfg.rest_hours, blocks=cfg.blocks)
    if cfg.charge_minutes >= cfg.discharge_minutes:
        raise ValueError("charge pulse must be shorter than the discharge pulse for a net discharge")
    b = _Builder(cell.dt)
    _reset(b, cfg.reset, cell)
    amp = cfg.c_rate * cell.one_c
    for _ in range(cfg.blocks):
        b.add(amp, cfg.discharge_minutes * 60, "pulse_discharge")
        b.add(0.0, cfg.rest_hours * 3600, "rest")
        b.add(-amp, cfg.charge_minutes * 60, "pulse_charge")
        b.add(0.0, cfg.rest_hours * 3600, "rest")
    return b.build(CURRENT)


def charge_pulse_block_change(cfg: ChargePulseConfig):
    """Net SOC change of one discharge/charge block (negative = net discharge)."""
    return cfg.c_rate * (cfg.charge_minutes - cfg.discharge_minutes) / 60.0


def gen_drive_cycle(power_trace, cfg: DriveConfig, cell: CellConfig) -> Profile:
    """Alternate energy-scaled drive blocks and rests.

    Each block is the first ``block_hours`` of ``power_trace`` (sampled at
    ``cell.dt``) rescaled so it draws ``depth_per_block`` of the nominal
    energy ``capacity_q * nominal_voltage``.
    """
    trace = np.asarray(power_trace, dtype=float)
    bad = np.flatnonzero(~np.isfinite(trace))
    if bad.size:
        raise DataError(f"non-finite power sample at index {int(bad[0])}")
    n_block = int(round(cfg.block_hours * 3600 / cell.dt))
    if trace.size < n_block:
        raise ValueError(f"power trace covers {trace.size * cell.dt:.0f} s, need {cfg.block_hours} h")
    block = trace[:n_block]
    raw = block.sum() * cell.dt
    if not raw > 0:
        raise ValueError("drive block must have positive net energy")
    scale = cfg.depth_per_block * cell.capacity_q * cfg.nominal_voltage / raw
    b = _Builder(cell.dt)
    _reset(b, cfg.reset, cell)
    if cfg.lead_rest_minutes > 0:
        b.add(0.0, cfg.lead_rest_minutes * 60, "rest")
    for k in range(cfg.blocks):
        b.add_series(block * scale, "drive")
        if k < cfg.blocks - 1 or cfg.trailing_rest:
            b.add(0.0, cfg.rest_hours * 3600, "rest")
    prof = b.build(POWER)
    prof.values[prof.labels == LABEL_CODE["rest"]] = 0.0
    return prof


def pseudo_drive_trace(duration_s=3600.0, dt=0.1, seed=0, mean_power=6.0):
    """Stand-in per-cell power trace (W), NOT the WLTP-derived series.

    A sum of smooth random bursts (acceleration and smaller regenerative
    bursts) over a low-frequency cruise component; deterministic for a seed.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s / dt))
    t = np.arange(n) * dt
    p = np.zeros(n)
    # cruise: a few slow sinusoids, kept non-negative
    for _ in range(4):
        period = rng.uniform(200, 900)
        p += rng.uniform(0.3, 1.0) * (1 + np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi)))
    s = 0.0
    while True:
        s += rng.exponential(25.0)
        if s >= duration_s:
            break
        width = rng.uniform(6.0, 40.0)
        k0 = int(s / dt)
        k1 = min(n, k0 + int(width / dt))
        if k1 - k0 < 2:
            continue
        shape = np.sin(np.linspace(0, np.pi, k1 - k0)) ** 2
        if rng.random() < 0.25:
            amp = -rng.uniform(1.0, 6.0)
        else:
            amp = rng.lognormal(np.log(6.0), 0.5)
        p[k0:k1] += amp * shape
    p *= mean_power / p.mean()
    return p


def write_profile(profile: Profile, path_or_file):
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh)
        w.writerow(("time_s", "mode", "value", "label"))
        t = profile.time
        for k in range(len(profile)):
            w.writerow((repr(float(t[k])), profile.mode, repr(float(profile.values[k])), LABELS[profile.labels[k]]))
    finally:
        if own:
            fh.close()


def read_profile(path) -> Profile:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["time_s", "mode", "value", "label"]:
            raise DataError(f"{path}: bad profile header {header}")
        t, vals, labs, modes = [], [], [], set()
        for rowno, row in enumerate(reader, start=2):
            if len(row) != 4 or row[3] not in LABEL_CODE:
                raise DataError(f"{path}: malformed row {rowno}")
            t.append(float(row[0]))
            modes.add(row[1])
            vals.append(float(row[2]))
            labs.append(LABEL_CODE[row[3]])
    if len(modes) != 1 or len(t) < 2:
        raise DataError(f"{path}: profile needs >= 2 rows of a single mode")
    t = np.array(t)
    dt = t[1] - t[0]
    if not np.array_equal(np.arange(len(t)) * dt, t):
        raise DataError(f"{path}: profile is not uniformly sampled from t=0")
    return Profile(float(dt), modes.pop(), np.array(vals), np.array(labs, dtype=np.int8))
