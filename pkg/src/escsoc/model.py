"""Discrete-time enhanced self-correcting (ESC) cell model.

The model is a two-RC Thevenin circuit in series with a single-state
hysteresis element ``m * h``.  State ordering is ``[z, i_r1, i_r2, h]``
throughout the package and current is positive on discharge.

    z'    = z - eta*dt/Q * i
    i_rj' = a_j * i_rj + (1 - a_j) * i,         a_j = exp(-dt/tau_j)
    h'    = a_h * h + (a_h - 1) * sgn(i),       a_h = exp(-|i*eta*gamma*dt/Q|)
    v     = v_oc(z) + m*h - r1*i_r1 - r2*i_r2 - r0*i
"""

from __future__ import annotations

import math
import warnings
from dataclasses import astuple, dataclass, replace
from typing import NamedTuple

import numpy as np

from . import _kernels as K

PARAM_NAMES = ("r0", "r1", "r2", "tau1", "tau2", "m", "gamma")

# Identification box.  tau ranges are disjoint so each RC branch keeps its role.
BOUNDS = {
    "r0": (0.0, 1.0),
    "r1": (0.0, 1.0),
    "r2": (0.0, 1.0),
    "tau1": (0.5, 25.0),
    "tau2": (50.0, 500.0),
    "gamma": (0.0, 3000.0),
}


class PowerInfeasibleError(ValueError):
    """Requested power exceeds what the cell can deliver from its present state."""

    def __init__(self, power, max_power):
        super().__init__(f"power infeasible: requested {power:.6g} W, max deliverable {max_power:.6g} W")
        self.power = power
        self.max_power = max_power


class NonFiniteInputError(ValueError):
    def __init__(self, index):
        super().__init__(f"non-finite input at sample {index}")
        self.index = index


@dataclass(frozen=True)
class ParamSet:
    r0: float
    r1: float
    r2: float
    tau1: float
    tau2: float
    m: float = 0.0
    gamma: float = 0.0

    def validate(self):
        for name, (lo, hi) in BOUNDS.items():
            val = getattr(self, name)
            if not (lo <= val <= hi):
                raise ValueError(f"{name}={val!r} outside [{lo}, {hi}]")
        if not self.m >= 0.0:
            raise ValueError(f"m={self.m!r} must be non-negative")
        return self

    def as_array(self):
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, arr):
        return cls(*(float(a) for a in arr))


@dataclass(frozen=True)
class CellState:
    z: float
    i_r1: float = 0.0
    i_r2: float = 0.0
    h: float = 0.0

    def as_array(self):
        return np.array([self.z, self.i_r1, self.i_r2, self.h], dtype=float)

    @classmethod
    def from_array(cls, arr):
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


@dataclass(frozen=True)
class CellConfig:
    capacity_q: float = 18000.0
    eta: float = 1.0
    dt: float = 0.1
    v_max: float = 4.2
    v_min: float = 2.5

    def __post_init__(self):
        if not self.capacity_q > 0:
            raise ValueError("capacity_q must be positive")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")

    @property
    def one_c(self):
        """Current of a 1C rate in amperes."""
        return self.capacity_q / 3600.0

    def with_dt(self, dt):
        return replace(self, dt=dt)


class ParameterTable:
    """SOC-indexed ESC parameters with linear interpolation and end clamping."""

    def __init__(self, soc_breakpoints, entries, hysteresis_mode="esc"):
        bp = np.asarray(soc_breakpoints, dtype=float)
        if bp.ndim != 1 or bp.size < 2:
            raise ValueError("a parameter table needs at least 2 breakpoints")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly ascending")
        if hysteresis_mode not in ("none", "esc"):
            raise ValueError(f"unknown hysteresis mode {hysteresis_mode!r}")
        if isinstance(entries, np.ndarray):
            arr = np.array(entries, dtype=float)
        else:
            arr = np.array([e.as_array() if isinstance(e, ParamSet) else e for e in entries], dtype=float)
        if arr.shape != (bp.size, len(PARAM_NAMES)):
            raise ValueError(f"expected {bp.size} entries of {len(PARAM_NAMES)} values, got {arr.shape}")
        for row in arr:
            ParamSet.from_array(row).validate()
        if hysteresis_mode == "none" and np.any(arr[:, 5:] != 0.0):
            raise ValueError("hysteresis_mode='none' requires m = gamma = 0 everywhere")
        self.soc_breakpoints = bp
        self.values = arr
        self.hysteresis_mode = hysteresis_mode
        self.values.flags.writeable = False
        self.soc_breakpoints.flags.writeable = False

    @property
    def entries(self):
        return [ParamSet.from_array(r) for r in self.values]

    def __len__(self):
        return self.soc_breakpoints.size

    def column(self, name):
        return self.values[:, PARAM_NAMES.index(name)].copy()

    def with_column(self, name, values):
        arr = self.values.copy()
        arr[:, PARAM_NAMES.index(name)] = values
        return ParameterTable(self.soc_breakpoints, arr, self.hysteresis_mode)

    def without_hysteresis(self):
        arr = self.values.copy()
        arr[:, 5:] = 0.0
        return ParameterTable(self.soc_breakpoints, arr, "none")

    def __eq__(self, other):
        return (
            isinstance(other, ParameterTable)
            and self.hysteresis_mode == other.hysteresis_mode
            and np.array_equal(self.soc_breakpoints, other.soc_breakpoints)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return f"ParameterTable({len(self)} breakpoints, hysteresis_mode={self.hysteresis_mode!r})"


class OCVData:
    """Charge/discharge open-circuit voltage branches on a common SOC grid.

    ``v_mean`` and ``m_table`` are derived from the two branches so the
    averaging identities hold exactly.
    """

    def __init__(self, soc_breakpoints, v_charge, v_discharge):
        self.soc_breakpoints = np.asarray(soc_breakpoints, dtype=float)
        self.v_charge = np.asarray(v_charge, dtype=float)
        self.v_discharge = np.asarray(v_discharge, dtype=float)
        n = self.soc_breakpoints.size
        if n < 2 or self.v_charge.shape != (n,) or self.v_discharge.shape != (n,):
            raise ValueError("OCV branches must match the SOC grid (>= 2 points)")
        if np.any(np.diff(self.soc_breakpoints) <= 0):
            raise ValueError("OCV SOC grid must be strictly ascending")
        if np.any(self.v_charge < self.v_discharge):
            raise ValueError("charge branch below discharge branch")
        self.v_mean = (self.v_charge + self.v_discharge) / 2
        self.m_table = (self.v_charge - self.v_discharge) / 2
        if np.any(np.diff(self.v_mean) < -1e-12):
            raise ValueError("mean OCV must be non-decreasing in SOC")

    @classmethod
    def from_mean(cls, soc, v_mean, m=None):
        v_mean = np.asarray(v_mean, dtype=float)
        m = np.zeros_like(v_mean) if m is None else np.asarray(m, dtype=float)
        return cls(soc, v_mean + m, v_mean - m)

    def voc(self, z, temperature=None):
        """Mean OCV at SOC ``z``; temperature is accepted and ignored (single 25 degC table)."""
        return float(K.interp1(self.soc_breakpoints, self.v_mean, float(z)))

    def hysteresis_at(self, z):
        return float(K.interp1(self.soc_breakpoints, self.m_table, float(z)))

    def slope(self, z):
        return float(K.secant_slope(self.soc_breakpoints, self.v_mean, float(z)))

    def __eq__(self, other):
        return (
            isinstance(other, OCVData)
            and np.array_equal(self.soc_breakpoints, other.soc_breakpoints)
            and np.array_equal(self.v_charge, other.v_charge)
            and np.array_equal(self.v_discharge, other.v_discharge)
        )

    def __repr__(self):
        return f"OCVData({self.soc_breakpoints.size} points)"


def interp_params(table: ParameterTable, soc: float) -> ParamSet:
    out = np.empty(len(PARAM_NAMES))
    K.interp_row(table.soc_breakpoints, table.values, float(soc), out)
    return ParamSet.from_array(out)


def step_state(state: CellState, params: ParamSet, i: float, cfg: CellConfig) -> CellState:
    out = K.step(state.z, state.i_r1, state.i_r2, state.h, float(i),
                 params.tau1, params.tau2, params.gamma, cfg.dt, cfg.capacity_q, cfg.eta)
    return CellState(*out)


def output_voltage(state: CellState, params: ParamSet, ocv: OCVData, i: float, temperature=None) -> float:
    return (ocv.voc(state.z, temperature) + params.m * state.h
            - params.r1 * state.i_r1 - params.r2 * state.i_r2 - params.r0 * i)


def solve_current_for_power(state: CellState, params: ParamSet, ocv: OCVData, p: float) -> float:
    """Current that delivers power ``p`` with RC currents held at their pre-step values.

    Raises :class:`PowerInfeasibleError` when ``E**2 < 4*r0*p``.
    """
    emf = ocv.voc(state.z) + params.m * state.h - params.r1 * state.i_r1 - params.r2 * state.i_r2
    i, bad = K.power_current(emf, params.r0, float(p))
    if bad:
        raise PowerInfeasibleError(p, emf * emf / (4 * params.r0))
    return i


def state_jacobian(state: CellState, params: ParamSet, cfg: CellConfig, i: float) -> np.ndarray:
    a_h = math.exp(-abs(i * cfg.eta * params.gamma * cfg.dt / cfg.capacity_q))
    return np.diag([1.0, math.exp(-cfg.dt / params.tau1), math.exp(-cfg.dt / params.tau2), a_h])


def output_jacobian(state: CellState, params: ParamSet, ocv: OCVData) -> np.ndarray:
    return np.array([[ocv.slope(state.z), -params.r1, -params.r2, params.m]])


class Simulation(NamedTuple):
    voltage: np.ndarray
    states: np.ndarray          # (n_done + 1, 4)
    current: np.ndarray
    annotations: list
    n_done: int


def _check_finite(values):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NonFiniteInputError(int(bad[0]))


def simulate(table: ParameterTable, ocv: OCVData, cfg: CellConfig, current_series,
             x0: CellState, *, stop_at_vmin=False, power=False) -> Simulation:
    """Run the model over a uniformly sampled current (or power) series.

    Voltage-limit crossings are reported in ``annotations`` as
    ``(index, kind)`` tuples; the run is only cut short when ``stop_at_vmin``.
    """
    u = np.ascontiguousarray(current_series, dtype=float)
    _check_finite(u)
    x = x0.as_array()
    _check_finite(x)
    cur, volt, states, done, flags = K.run_model(
        K.MODE_POWER if power else K.MODE_CURRENT, u, x,
        table.soc_breakpoints, table.values, ocv.soc_breakpoints, ocv.v_mean,
        cfg.dt, cfg.capacity_q, cfg.eta, cfg.v_min, cfg.v_max,
        K.STOP_VMIN if stop_at_vmin else K.STOP_NONE)
    annotations = _annotate(flags[:done])
    if done < u.size:
        annotations.append((done, "stopped_at_v_min"))
    z_end = states[done, 0]
    if not (-0.01 <= z_end <= 1.01):
        warnings.warn(f"simulated SOC left [0, 1]: z={z_end:.4f}", RuntimeWarning, stacklevel=2)
    return Simulation(volt[:done], states[: done + 1], cur[:done], annotations, done)


def _annotate(flags):
    """First index of each contiguous run of each limit flag."""
    out = []
    for bit, kind in ((1, "power_infeasible"), (2, "below_v_min"), (4, "above_v_max")):
        hit = (flags & bit) != 0
        if not hit.any():
            continue
        starts = np.flatnonzero(hit & ~np.concatenate(([False], hit[:-1])))
        out.extend((int(s), kind) for s in starts)
    out.sort()
    return out


def relaxed_state(z, h=0.0):
    return CellState(float(z), 0.0, 0.0, float(h))
