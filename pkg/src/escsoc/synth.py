"""Synthetic ground-truth cells and noisy dataset synthesis."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import _kernels as K
from .data import Dataset, Truth
from .model import BOUNDS, PARAM_NAMES, CellConfig, CellState, OCVData, ParameterTable
from .protocols import POWER, Profile

# Anchor points of an NMC-like mean OCV curve (SOC, V).
_OCV_ANCHORS = np.array([
    [0.00, 2.90], [0.02, 3.15], [0.05, 3.34], [0.10, 3.45], [0.20, 3.55],
    [0.30, 3.62], [0.40, 3.67], [0.50, 3.72], [0.60, 3.80], [0.70, 3.89],
    [0.80, 3.94], [0.90, 4.01], [1.00, 4.09],
])


def default_truth_table(m_peak=0.030, gamma=100.0, breakpoints=None) -> ParameterTable:
    """U-shaped resistances, mildly SOC-dependent time constants, M peaking mid-SOC."""
    if breakpoints is None:
        breakpoints = np.arange(20) * 0.05 + 0.025
    bp = np.asarray(breakpoints, dtype=float)
    u = (2 * bp - 1) ** 2
    cols = [
        0.018 + 0.010 * u,
        0.008 + 0.006 * u,
        0.012 + 0.008 * u,
        5.0 + 1.5 * u,
        120.0 + 40.0 * u,
        m_peak * np.sin(np.pi * bp),
        np.full_like(bp, gamma),
    ]
    mode = "esc" if m_peak > 0 or gamma > 0 else "none"
    return ParameterTable(bp, np.column_stack(cols), mode)


def default_truth_ocv(table: ParameterTable, grid_step=0.02) -> OCVData:
    """Mean OCV from the anchor curve; branch gap follows the table's m so both agree."""
    grid = np.round(np.arange(0, 1 + grid_step / 2, grid_step), 12)
    v_mean = PchipInterpolator(_OCV_ANCHORS[:, 0], _OCV_ANCHORS[:, 1])(grid)
    m = np.interp(grid, table.soc_breakpoints, table.column("m"))
    return OCVData.from_mean(grid, v_mean, m)


@dataclass
class TruthCell:
    table: ParameterTable
    ocv: OCVData
    cfg: CellConfig
    x0: CellState = field(default_factory=lambda: CellState(1.0, 0.0, 0.0, 1.0))
    name: str = "cell"


@dataclass
class TruthCellSpec:
    table: ParameterTable
    ocv: OCVData
    cfg: CellConfig = field(default_factory=CellConfig)
    # relative sd per parameter (r0..gamma, q); "ocv" is an absolute offset sd in volts
    cell_to_cell_spread: dict = field(default_factory=dict)
    x0: CellState = field(default_factory=lambda: CellState(1.0, 0.0, 0.0, 1.0))

    @classmethod
    def default(cls, m_peak=0.030, gamma=100.0, spread=0.02, cfg=None, q_spread=0.0):
        table = default_truth_table(m_peak, gamma)
        spreads = {name: spread for name in PARAM_NAMES if name != "gamma" or gamma > 0}
        if m_peak == 0:
            spreads.pop("m", None)
        spreads["q"] = q_spread
        spreads["ocv"] = 0.002 if spread > 0 else 0.0
        return cls(table, default_truth_ocv(table), cfg or CellConfig(), spreads)

    def validate(self):
        for row in self.table.values:
            for name, val in zip(PARAM_NAMES, row):
                if name in BOUNDS:
                    lo, hi = BOUNDS[name]
                    if name == "gamma" and val == 0:
                        continue
                    if not lo < val < hi:
                        raise ValueError(f"truth {name}={val} is not strictly inside the identification box")
        return self


@dataclass
class SensorModel:
    voltage_noise_sd: float = 0.0
    current_noise_sd: float = 0.0
    current_bias: float = 0.0
    voltage_lsb: float = 1e-3
    current_lsb: float = 1e-3

    def __post_init__(self):
        if self.voltage_noise_sd < 0 or self.current_noise_sd < 0:
            raise ValueError("sensor noise sds must be non-negative")

    @property
    def voltage_variance(self):
        """Noise plus uniform quantisation variance."""
        return self.voltage_noise_sd ** 2 + self.voltage_lsb ** 2 / 12

    @property
    def current_variance(self):
        """Error budget of the current channel: noise, bias and quantisation."""
        return self.current_noise_sd ** 2 + self.current_bias ** 2 + self.current_lsb ** 2 / 12


_INTERIOR = 1e-4   # keep perturbed values this fraction of the box width away from bounds


def make_cells(spec: TruthCellSpec, n: int, seed) -> list[TruthCell]:
    """Draw ``n`` cells around the spec with one multiplicative factor per parameter."""
    if n < 1:
        raise ValueError("need at least one cell")
    rng = np.random.default_rng(seed)
    spread = spec.cell_to_cell_spread
    names = list(PARAM_NAMES) + ["q", "ocv"]
    cells, clamped, draws = [], 0, 0
    for k in range(n):
        z = rng.standard_normal(len(names))
        vals = spec.table.values.copy()
        for c, name in enumerate(PARAM_NAMES):
            s = spread.get(name, 0.0)
            if s == 0:
                continue
            col = vals[:, c] * (1 + s * z[c])
            if name in BOUNDS:
                lo, hi = BOUNDS[name]
                pad = _INTERIOR * (hi - lo)
                fixed = np.clip(col, lo + pad, hi - pad)
                clamped += int(np.any(fixed != col))
                col = fixed
            else:
                fixed = np.maximum(col, 0.0)
                clamped += int(np.any(fixed != col))
                col = fixed
            vals[:, c] = col
            draws += 1
        q = spec.cfg.capacity_q * (1 + spread.get("q", 0.0) * z[-2])
        off = spread.get("ocv", 0.0) * z[-1]
        ocv = OCVData(spec.ocv.soc_breakpoints, spec.ocv.v_charge + off, spec.ocv.v_discharge + off)
        table = ParameterTable(spec.table.soc_breakpoints, vals, spec.table.hysteresis_mode)
        if table.hysteresis_mode == "esc":
            # keep the OCV branch gap consistent with the perturbed m
            m = np.interp(ocv.soc_breakpoints, table.soc_breakpoints, table.column("m"))
            ocv = OCVData.from_mean(ocv.soc_breakpoints, ocv.v_mean, m)
        cfg = CellConfig(q, spec.cfg.eta, spec.cfg.dt, spec.cfg.v_max, spec.cfg.v_min)
        cells.append(TruthCell(table, ocv, cfg, spec.x0, name=f"cell{k}"))
    if draws and clamped > 0.1 * draws:
        warnings.warn(f"cell spread forced clamping on {clamped}/{draws} draws", RuntimeWarning, stacklevel=2)
    return cells


def _quantise(x, lsb):
    if lsb <= 0:
        return x
    return np.round(x / lsb) * lsb


def run_truth(cell: TruthCell, profile: Profile, x0: CellState | None = None, cutoff_c_rate=0.01):
    """Noise-free closed-loop run of a profile.

    Discharge and drive segments end the run at v_min; charge segments are
    truncated at v_max; cv_hold segments hold the target voltage until the
    current falls below the cutoff; infeasible power ends the run.
    """
    cfg = cell.cfg.with_dt(profile.dt)
    x = (x0 or cell.x0).as_array()
    bp, tab = cell.table.soc_breakpoints, cell.table.values
    osoc, ov = cell.ocv.soc_breakpoints, cell.ocv.v_mean
    parts_i, parts_v, parts_s, parts_l, notes = [], [], [x[None, :]], [], []
    offset = 0
    for name, start, stop in profile.segments():
        u = profile.values[start:stop]
        if name == "cv_hold":
            mode, mask = K.MODE_VOLTAGE, K.STOP_CUTOFF
        elif profile.mode == POWER:
            mode, mask = K.MODE_POWER, K.STOP_VMIN | K.STOP_INFEASIBLE
        else:
            mode = K.MODE_CURRENT
            mask = K.STOP_VMAX if name == "pulse_charge" else K.STOP_VMIN if name != "rest" else K.STOP_NONE
        cur, volt, states, done, flags = K.run_model(
            mode, np.ascontiguousarray(u), x, bp, tab, osoc, ov, cfg.dt, cfg.capacity_q, cfg.eta,
            cfg.v_min, cfg.v_max, mask, cutoff_c_rate * cfg.one_c)
        parts_i.append(cur[:done])
        parts_v.append(volt[:done])
        parts_s.append(states[1:done + 1])
        parts_l.append(np.full(done, profile.labels[start], dtype=np.int8))
        x = states[done].copy()
        if done < u.size:
            if flags[done] & 1:
                notes.append((offset + done, "power_infeasible_truncated"))
                break
            if mode == K.MODE_VOLTAGE:
                notes.append((offset + done, "cv_cutoff"))
            elif flags[done] & 4:
                notes.append((offset + done, "v_max_segment_truncated"))
            else:
                notes.append((offset + done, "v_min_terminated"))
                break
        offset += done
    return (np.concatenate(parts_i), np.concatenate(parts_v), np.concatenate(parts_s),
            np.concatenate(parts_l), notes)


def synthesize(cell: TruthCell, profile: Profile, sensors: SensorModel, seed, x0: CellState | None = None) -> Dataset:
    """Measured dataset for ``cell`` driven by ``profile``.

    Voltage and current channels get gaussian noise (plus a current bias)
    then quantisation; power is the product of the measured channels.  The
    noise-free trajectory is kept in ``Dataset.truth``.
    """
    i_true, v_true, states, labels, notes = run_truth(cell, profile, x0)
    n = i_true.size
    rng = np.random.default_rng(seed)
    ev = rng.standard_normal(n) * sensors.voltage_noise_sd
    ei = rng.standard_normal(n) * sensors.current_noise_sd
    v_meas = _quantise(v_true + ev, sensors.voltage_lsb)
    i_meas = _quantise(i_true + sensors.current_bias + ei, sensors.current_lsb)
    power = v_meas * i_meas
    truth = Truth(states[:n, 0].copy(), i_true, v_true, states)
    return Dataset(profile.dt, i_meas, v_meas, power, labels, truth=truth, annotations=notes)
