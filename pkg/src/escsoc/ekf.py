"""Extended Kalman filtering of the ESC state and a Coulomb-counting baseline.

The filter state is ``[z, i_r1, i_r2, h]``.  Three schemes share one loop:

* ``coulomb``: integrate the current solved from measured power, no correction;
* ``constant_ekf``: fixed process and measurement noise;
* ``adaptive_ekf``: noise recomputed every step by first-order propagation of
  parameter and current-sensor uncertainty at the present SOC and current.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _kernels as K
from .data import Dataset
from .model import CellConfig, CellState, OCVData, ParameterTable
from .protocols import Profile

SCHEMES = ("coulomb", "constant_ekf", "adaptive_ekf")
_SCHEME_CODE = {"coulomb": K.SCHEME_COULOMB, "constant_ekf": K.SCHEME_CONSTANT, "adaptive_ekf": K.SCHEME_ADAPTIVE}
# CLI spellings
SCHEME_ALIASES = {"const-ekf": "constant_ekf", "adaptive-ekf": "adaptive_ekf"}

VARIANCE_NAMES = ("r0", "r1", "r2", "tau1", "tau2", "m", "q", "gamma", "ocv")
DEFAULT_SIGMA0 = np.diag([1e-4, 1e-2, 1e-2, 1e-2])


class CovarianceError(FloatingPointError):
    """Innovation variance is not positive, so the covariance is corrupt."""


@dataclass(frozen=True)
class EkfState:
    x_hat: np.ndarray
    sigma_x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_hat, dtype=float).reshape(4)
        P = np.asarray(self.sigma_x, dtype=float).reshape(4, 4)
        object.__setattr__(self, "x_hat", x)
        object.__setattr__(self, "sigma_x", P)

    @classmethod
    def from_state(cls, state: CellState, sigma=DEFAULT_SIGMA0):
        return cls(state.as_array(), np.array(sigma, dtype=float))

    @property
    def state(self) -> CellState:
        return CellState.from_array(self.x_hat)

    def is_healthy(self, tol=1e-10):
        P = self.sigma_x
        scale = max(1.0, float(np.max(np.abs(P))))
        sym = np.max(np.abs(P - P.T)) <= 1e-12 * scale
        psd = np.min(np.linalg.eigvalsh(P)) >= -tol * scale
        return bool(sym and psd and -1.0 <= self.x_hat[3] <= 1.0)


@dataclass
class NoiseConfig:
    """Noise settings for both EKF schemes.

    ``param_variances`` maps each name in :data:`VARIANCE_NAMES` to variances
    tabulated on ``variance_soc`` (q in (A s)^2, ocv in V^2).
    """

    sigma_v_const: float
    sigma_w_const: np.ndarray
    current_noise_var: float
    sensor_var: float
    variance_soc: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0]))
    param_variances: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sigma_w_const = np.asarray(self.sigma_w_const, dtype=float).reshape(4, 4)
        self.variance_soc = np.asarray(self.variance_soc, dtype=float)
        self.param_variances = {k: np.broadcast_to(np.asarray(v, dtype=float), self.variance_soc.shape).copy()
                                for k, v in self.param_variances.items()}
        for name in ("sigma_v_const", "current_noise_var", "sensor_var"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        for k, v in self.param_variances.items():
            if np.any(v < 0):
                raise ValueError(f"negative variance in table {k!r}")
        if np.min(np.linalg.eigvalsh((self.sigma_w_const + self.sigma_w_const.T) / 2)) < -1e-15:
            raise ValueError("sigma_w_const is not positive semi-definite")

    def variance_table(self):
        """(n, 9) array in :data:`VARIANCE_NAMES` order; raises when entries are missing."""
        missing = [n for n in VARIANCE_NAMES if n not in self.param_variances]
        if missing:
            raise KeyError(f"missing variance tables: {', '.join(missing)}")
        return np.ascontiguousarray(np.column_stack([self.param_variances[n] for n in VARIANCE_NAMES]))

    def to_dict(self):
        return {
            "sigma_v_const": self.sigma_v_const,
            "sigma_w_const": self.sigma_w_const.tolist(),
            "current_noise_var": self.current_noise_var,
            "sensor_var": self.sensor_var,
            "variance_soc": self.variance_soc.tolist(),
            "param_variances": {k: v.tolist() for k, v in self.param_variances.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["sigma_v_const"], np.array(d["sigma_w_const"]), d["current_noise_var"], d["sensor_var"],
                   np.array(d.get("variance_soc", [0.0, 1.0])),
                   {k: np.array(v) for k, v in d.get("param_variances", {}).items()})


def _params(table, z):
    p = np.empty(table.values.shape[1])
    K.interp_row(table.soc_breakpoints, table.values, float(z), p)
    return p


def ekf_predict(ekf: EkfState, i, table: ParameterTable, ocv: OCVData, cfg: CellConfig, sigma_w) -> EkfState:
    """Propagate mean and covariance one step; h is clamped to [-1, 1]."""
    p = _params(table, ekf.x_hat[0])
    x, P = K.ekf_predict(ekf.x_hat, ekf.sigma_x, float(i), p, cfg.dt, cfg.capacity_q, cfg.eta,
                         np.asarray(sigma_w, dtype=float))
    return EkfState(x, P)


def ekf_update(ekf: EkfState, v_meas, i, table: ParameterTable, ocv: OCVData, sigma_v) -> EkfState:
    """Joseph-form measurement update with the linearised output equation."""
    x = ekf.x_hat
    p = _params(table, x[0])
    vpred = (ocv.voc(x[0]) + p[K.M] * x[3] - p[K.R1] * x[1] - p[K.R2] * x[2] - p[K.R0] * i)
    C = K.output_row(x, p, ocv.soc_breakpoints, ocv.v_mean)
    xn, Pn, _, s = K.ekf_update(x, ekf.sigma_x, float(v_meas), vpred, C, float(sigma_v))
    if not s > 0:
        raise CovarianceError(f"innovation variance {s!r} is not positive")
    return EkfState(xn, Pn)


def _variances_at(noise: NoiseConfig, soc):
    tab = noise.variance_table()
    out = np.empty(tab.shape[1])
    K.interp_row(noise.variance_soc, tab, float(soc), out)
    return out


def adaptive_covariance(soc, i, noise: NoiseConfig, table: ParameterTable, ocv: OCVData, cfg: CellConfig,
                        state: CellState | None = None):
    """Process and measurement noise at operating point (soc, i).

    Sigma_w = J diag(var_q, var_tau1, var_tau2, var_gamma) J^T + b var_i b^T
    with J and b the derivatives of the state update; sigma_v adds the
    output-equation parameter terms to the sensor variance.  ``state``
    supplies the RC currents and h used by the sensitivities; it defaults to
    a relaxed cell at ``soc``.
    """
    x = (state or CellState(float(soc))).as_array()
    x[0] = soc
    p = _params(table, soc)
    var = _variances_at(noise, soc)
    return K.adaptive_noise(x, float(i), p, var, cfg.dt, cfg.capacity_q, cfg.eta,
                            noise.current_noise_var, noise.sensor_var)


def parameter_sensitivities(state: CellState, i, params, cfg: CellConfig):
    """(J, b): derivatives of the next state w.r.t. (q, tau1, tau2, gamma) and w.r.t. current."""
    p = params.as_array() if hasattr(params, "as_array") else np.asarray(params, dtype=float)
    return K.sensitivities(state.as_array(), float(i), p, cfg.dt, cfg.capacity_q, cfg.eta)


def coulomb_count(current, cfg: CellConfig, z0) -> np.ndarray:
    """z_k = z0 - eta*dt/Q * sum_{j<k} i_j, for k = 0..n."""
    return K.coulomb(np.ascontiguousarray(current, dtype=float), float(z0), cfg.dt, cfg.capacity_q, cfg.eta)


def soc_from_rest_voltage(v_rest, ocv: OCVData, h=0.0) -> float:
    """Invert the rest-voltage curve v_mean + h*m at a rested voltage.

    Flat stretches would make the inverse ambiguous, so only points where
    the curve strictly increases are used.
    """
    curve = ocv.v_mean + float(h) * ocv.m_table
    keep = np.concatenate(([True], np.diff(curve) > 0))
    keep &= np.maximum.accumulate(curve) == curve
    return float(np.interp(float(v_rest), curve[keep], ocv.soc_breakpoints[keep]))


@dataclass
class SocRunReport:
    scheme: str
    soc: np.ndarray                 # posterior SOC per sample
    current: np.ndarray             # model current per sample
    soc_sd: np.ndarray
    flags: np.ndarray               # bit 0: power infeasible (current saturated), bit 1: update skipped
    true_soc: np.ndarray | None = None
    abs_error: np.ndarray | None = None
    rms_error: float = float("nan")
    max_error: float = float("nan")
    end_error: float = float("nan")
    dt: float = 1.0

    @property
    def infeasible_steps(self):
        return int(np.count_nonzero(self.flags & 1))

    def to_dict(self):
        return {
            "scheme": self.scheme,
            "samples": int(self.soc.size),
            "rms_error": self.rms_error,
            "max_error": self.max_error,
            "end_error": self.end_error,
            "infeasible_steps": self.infeasible_steps,
            "final_soc": float(self.soc[-1]) if self.soc.size else None,
        }


def estimate_soc_run(profile: Profile | None, meas: Dataset, table: ParameterTable, ocv: OCVData, cfg: CellConfig,
                     scheme: str, noise: NoiseConfig, x0: CellState, sigma0=DEFAULT_SIGMA0) -> SocRunReport:
    """Estimate SOC over a measured power-driven run.

    Each step solves the model current from the measured power (voltage times
    current channel) at the present estimate.  EKF schemes correct with the
    measured voltage and then propagate; ``coulomb`` only propagates.  Power
    beyond the model's deliverable maximum saturates the current and is
    flagged.  Errors are computed when the dataset carries true SOC.
    """
    scheme = SCHEME_ALIASES.get(scheme, scheme)
    if scheme not in _SCHEME_CODE:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if profile is not None and len(profile) < len(meas):
        raise ValueError(f"profile has {len(profile)} samples, measurement has {len(meas)}")
    if not math.isclose(meas.dt, cfg.dt, rel_tol=1e-9):
        cfg = cfg.with_dt(meas.dt)
    if scheme == "adaptive_ekf":
        vtab = noise.variance_table()
        vbp = noise.variance_soc
    else:
        vtab = np.zeros((2, len(VARIANCE_NAMES)))
        vbp = np.array([0.0, 1.0])
    xs, cur, zsd, flags = K.run_estimator(
        _SCHEME_CODE[scheme], np.ascontiguousarray(meas.power, dtype=float),
        np.ascontiguousarray(meas.voltage, dtype=float), x0.as_array(), np.array(sigma0, dtype=float),
        table.soc_breakpoints, table.values, ocv.soc_breakpoints, ocv.v_mean,
        cfg.dt, cfg.capacity_q, cfg.eta, noise.sigma_w_const, float(noise.sigma_v_const),
        vbp, vtab, float(noise.current_noise_var), float(noise.sensor_var))
    rep = SocRunReport(scheme, xs[:, 0].copy(), cur, zsd, flags, dt=cfg.dt)
    if meas.truth is not None:
        rep.true_soc = meas.true_soc
        rep.abs_error = np.abs(rep.soc - rep.true_soc)
        rep.rms_error = float(np.sqrt(np.mean(rep.abs_error ** 2)))
        rep.max_error = float(np.max(rep.abs_error))
        rep.end_error = float(rep.abs_error[-1])
    return rep


# ---------------------------------------------------------------------------
# noise configuration from data


def parameter_variances(tables, soc=None, ocvs=None, capacities=None, nominal_q=None, floor_rel=0.01,
                        ocv_floor=1e-6 / 12):
    """Variance tables from the spread of fits across cells.

    Each component variance is the sample variance across ``tables`` (at the
    breakpoints ``soc``, default: those of the first table) floored at
    (floor_rel * mean)^2.  Capacity variance uses ``capacities`` when given,
    else the relative floor of ``nominal_q``.

    The OCV variance is the spread of the rest voltages about the curve the
    model uses: the cross-cell variance of each branch, averaged over the two
    branches, plus m^2 when the tables carry no hysteresis (both branches
    then sit m away from the mean curve).  It is floored at ``ocv_floor``,
    by default the variance of 1 mV quantisation.
    """
    tables = list(tables)
    if not tables:
        raise ValueError("need at least one fitted table")
    soc = tables[0].soc_breakpoints if soc is None else np.asarray(soc, dtype=float)
    out = {}
    for c, name in enumerate(("r0", "r1", "r2", "tau1", "tau2", "m", "gamma")):
        vals = np.array([[_params(t, s)[c] for s in soc] for t in tables])
        var = vals.var(axis=0, ddof=1) if len(tables) > 1 else np.zeros(soc.size)
        out[name] = np.maximum(var, (floor_rel * vals.mean(axis=0)) ** 2)
    if capacities is not None and len(capacities) > 1:
        qv = float(np.var(capacities, ddof=1))
        qm = float(np.mean(capacities))
    elif nominal_q is not None or capacities:
        qm = float(nominal_q if nominal_q is not None else capacities[0])
        qv = 0.0
    else:
        raise ValueError("need capacities or nominal_q for the capacity variance")
    out["q"] = np.full(soc.size, max(qv, (floor_rel * qm) ** 2))
    ocvs = list(ocvs or [])
    ov = np.zeros(soc.size)
    if len(ocvs) > 1:
        vc = np.array([np.interp(soc, o.soc_breakpoints, o.v_charge) for o in ocvs])
        vd = np.array([np.interp(soc, o.soc_breakpoints, o.v_discharge) for o in ocvs])
        ov = (vc.var(axis=0, ddof=1) + vd.var(axis=0, ddof=1)) / 2
    if tables[0].hysteresis_mode == "none" and ocvs:
        m = np.mean([np.interp(soc, o.soc_breakpoints, o.m_table) for o in ocvs], axis=0)
        ov = ov + m ** 2
    out["ocv"] = np.maximum(ov, ocv_floor)
    return soc, out


def constant_noise(table: ParameterTable, ocv: OCVData, cfg: CellConfig, noise: NoiseConfig, current, x0: CellState):
    """Time-averaged adaptive Sigma_w along a reference current schedule.

    The model is simulated over ``current`` from ``x0`` and the adaptive
    process noise is averaged over every step.  Returns (sigma_w, sigma_v)
    with sigma_v the sensor variance.
    """
    u = np.ascontiguousarray(current, dtype=float)
    _, _, states, done, _ = K.run_model(
        K.MODE_CURRENT, u, x0.as_array(), table.soc_breakpoints, table.values, ocv.soc_breakpoints, ocv.v_mean,
        cfg.dt, cfg.capacity_q, cfg.eta, -np.inf, np.inf, K.STOP_NONE)
    vtab = noise.variance_table()
    acc = _average_noise_kernel(states[:done], u[:done], table.soc_breakpoints, table.values, noise.variance_soc, vtab,
                         cfg.dt, cfg.capacity_q, cfg.eta, noise.current_noise_var, noise.sensor_var)
    return acc, noise.sensor_var


@njit(cache=True)
def _average_noise_kernel(states, current, bp, tab, vbp, vtab, dt, q, eta, current_var, sensor_var):
    n = current.shape[0]
    p = np.zeros(tab.shape[1])
    var = np.zeros(vtab.shape[1])
    acc = np.zeros((4, 4))
    for k in range(n):
        x = states[k]
        K.interp_row(bp, tab, x[0], p)
        K.interp_row(vbp, vtab, x[0], var)
        Sw, _ = K.adaptive_noise(x, current[k], p, var, dt, q, eta, current_var, sensor_var)
        acc += Sw
    return acc / max(n, 1)


def build_noise_config(table: ParameterTable, ocv: OCVData, cfg: CellConfig, sensor_var, current_noise_var,
                       variance_soc, param_variances, reference_current, x0: CellState) -> NoiseConfig:
    """Complete noise configuration: adaptive tables plus the constant tuning derived from them."""
    noise = NoiseConfig(sensor_var, np.zeros((4, 4)), current_noise_var, sensor_var, variance_soc, param_variances)
    sw, sv = constant_noise(table, ocv, cfg, noise, reference_current, x0)
    noise.sigma_w_const = (sw + sw.T) / 2
    noise.sigma_v_const = sv
    return noise
