"""Two-stage parameter identification from GITT-family data.

Stage one extracts OCV branches from the GITT-for-OCV run and fits the
resistances of every GITT pulse by ordinary least squares with fixed time
constants.  Stage two refines ``r0, r1, r2, tau1, tau2`` per breakpoint with a
bounded nonlinear least-squares solve, and an outer golden-section search
picks the hysteresis rate ``gamma``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import isotonic_regression, nnls
from scipy.signal import lfilter

from . import _kernels as K
from .data import Dataset
from .model import BOUNDS, PARAM_NAMES, CellConfig, OCVData, ParameterTable, ParamSet
from .optim import anderson_fixed_point, bounded_lsq, fd_steps, golden_section

log = logging.getLogger(__name__)

FIT_NAMES = ("r0", "r1", "r2", "tau1", "tau2")
FIT_LOWER = np.array([BOUNDS[n][0] for n in FIT_NAMES])
FIT_UPPER = np.array([BOUNDS[n][1] for n in FIT_NAMES])
GAMMA_BOUNDS = BOUNDS["gamma"]


class IdentificationError(RuntimeError):
    pass


class RankDeficientError(IdentificationError):
    def __init__(self, direction, names=("r0", "r1", "r2")):
        weights = ", ".join(f"{n}:{w:+.3f}" for n, w in zip(names, direction))
        super().__init__(f"regressor matrix is rank deficient along ({weights})")
        self.direction = direction


def rmse(pred, meas) -> float:
    pred = np.asarray(pred, dtype=float)
    meas = np.asarray(meas, dtype=float)
    if pred.shape != meas.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {meas.shape}")
    if pred.size == 0:
        raise ValueError("rmse of an empty series")
    d = pred - meas
    return math.sqrt(float(np.mean(d * d)))


@dataclass
class FitReport:
    table: ParameterTable
    per_breakpoint_rmse: np.ndarray
    global_rmse: float
    iterations: int = 0
    active_bounds: list = field(default_factory=list)     # (breakpoint soc, parameter)
    failed: list = field(default_factory=list)            # breakpoint socs kept at init
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "soc_breakpoints": self.table.soc_breakpoints.tolist(),
            "hysteresis_mode": self.table.hysteresis_mode,
            "per_breakpoint_rmse": [None if not np.isfinite(x) else float(x) for x in self.per_breakpoint_rmse],
            "global_rmse": self.global_rmse,
            "iterations": self.iterations,
            "active_bounds": [[float(s), p] for s, p in self.active_bounds],
            "failed": [float(s) for s in self.failed],
            "notes": list(self.notes),
        }


# ---------------------------------------------------------------------------
# segmentation


@dataclass(frozen=True)
class Window:
    start: int          # first pulse sample
    pulse_end: int      # first sample after the pulse
    stop: int           # first sample of the next pulse (or end of data)
    direction: int      # +1 discharge, -1 charge
    soc_start: float
    soc_end: float

    @property
    def mean_soc(self):
        return 0.5 * (self.soc_start + self.soc_end)


def detect_pulses(current, threshold, debounce=5):
    """(start, stop) index pairs of current pulses.

    A sample is active when |i| > threshold; state changes only after
    ``debounce`` consecutive samples agree, and the change is dated back to
    the first of them.
    """
    active = np.abs(np.asarray(current)) > threshold
    n = active.size
    if n == 0:
        return []
    # run-length encode, then drop runs shorter than the debounce length
    edges = np.flatnonzero(np.diff(active.astype(np.int8))) + 1
    starts = np.concatenate(([0], edges))
    stops = np.concatenate((edges, [n]))
    vals = active[starts]
    state = False
    pulses = []
    cur_start = None
    for s, e, v in zip(starts, stops, vals):
        if v != state and (e - s) >= debounce:
            state = v
            if v:
                cur_start = s
            else:
                pulses.append((int(cur_start), int(s)))
    if state:
        pulses.append((int(cur_start), n))
    return pulses


def soc_path(ds: Dataset, cfg: CellConfig, z0=1.0):
    """Coulomb-counted SOC, length len(ds)+1."""
    return K.coulomb(np.ascontiguousarray(ds.current, dtype=float), float(z0), ds.dt, cfg.capacity_q, cfg.eta)


def segment_windows(ds: Dataset, cfg: CellConfig, z, threshold_c=0.01, debounce=5):
    pulses = detect_pulses(ds.current, threshold_c * cfg.one_c, debounce)
    out = []
    for k, (s, e) in enumerate(pulses):
        stop = pulses[k + 1][0] if k + 1 < len(pulses) else len(ds)
        direction = 1 if np.mean(ds.current[s:e]) > 0 else -1
        out.append(Window(s, e, stop, direction, float(z[s]), float(z[e])))
    return out


def split_ocv_run(ds: Dataset, cfg: CellConfig, z0=1.0):
    """Split a GITT-for-OCV run at its first charge pulse.

    Returns (discharge_run, charge_run, z0_charge).
    """
    z = soc_path(ds, cfg, z0)
    for w in segment_windows(ds, cfg, z):
        if w.direction < 0:
            return ds.slice(0, w.start), ds.slice(w.start, len(ds)), float(z[w.start])
    raise IdentificationError("OCV run contains no charge pulses")


# ---------------------------------------------------------------------------
# OCV


def _rest_points(ds, cfg, z0):
    z = soc_path(ds, cfg, z0)
    wins = segment_windows(ds, cfg, z)
    pts = [(z[w.stop - 1], ds.voltage[w.stop - 1]) for w in wins if w.stop - 1 >= w.pulse_end]
    if not pts:
        raise IdentificationError("no rest periods found")
    pts = np.array(sorted(pts))
    # counted SOC carries roundoff; snap it so both ladders share grid points
    return np.round(pts[:, 0], 9), pts[:, 1]


def extract_ocv(discharge_run: Dataset, charge_run: Dataset, cfg: CellConfig,
                z0_discharge=1.0, z0_charge=None) -> OCVData:
    """Average the rest-end voltages of the two GITT-for-OCV ladders.

    SOC comes from Coulomb counting; ``z0_charge`` defaults to the SOC
    reached at the end of the discharge run.  The hysteresis gap is held
    flat beyond the range one branch covers, and the mean curve is made
    non-decreasing by isotonic projection with the gap left untouched.
    """
    if z0_charge is None:
        z0_charge = float(soc_path(discharge_run, cfg, z0_discharge)[-1])
    sd, vd = _rest_points(discharge_run, cfg, z0_discharge)
    sc, vc = _rest_points(charge_run, cfg, z0_charge)
    lo, hi = max(sd[0], sc[0]), min(sd[-1], sc[-1])
    if lo > hi:
        raise IdentificationError(f"charge SOC range [{sc[0]:.3f}, {sc[-1]:.3f}] and discharge range "
                                  f"[{sd[0]:.3f}, {sd[-1]:.3f}] do not overlap")
    grid = np.unique(np.concatenate((sd, sc)))
    v_dis = np.interp(grid, sd, vd)
    v_chg = np.interp(grid, sc, vc)
    inside = (grid >= lo) & (grid <= hi)
    gap = np.interp(grid, grid[inside], (v_chg - v_dis)[inside])   # flat outside the overlap
    v_dis = np.where((grid >= sd[0]) & (grid <= sd[-1]), v_dis, v_chg - gap)
    v_chg = np.where((grid >= sc[0]) & (grid <= sc[-1]), v_chg, v_dis + gap)
    m = (v_chg - v_dis) / 2
    if np.any(m < 0):
        warnings.warn(f"charge branch below discharge branch at {int(np.sum(m < 0))} points; clamping m to 0",
                      RuntimeWarning, stacklevel=2)
        m = np.maximum(m, 0.0)
    mean = (v_chg + v_dis) / 2
    mean = isotonic_regression(mean).x
    return OCVData.from_mean(grid, mean, m)


# ---------------------------------------------------------------------------
# ordinary least squares per pulse


def rc_currents(current, tau, dt, i0=0.0):
    """Branch current of one RC pair driven by ``current``; element k is before sample k."""
    a = math.exp(-dt / tau)
    cur = np.asarray(current, dtype=float)
    y, _ = lfilter([0.0, 1.0 - a], [1.0, -a], cur, zi=[a * i0])
    return y


@dataclass
class Segment:
    """Measured slice with its SOC path and hysteresis-state path."""

    current: np.ndarray
    voltage: np.ndarray
    soc: np.ndarray
    dt: float
    h: np.ndarray | None = None
    ir0: tuple = (0.0, 0.0)


def ols_system(seg: Segment, ocv: OCVData, tau1=2.0, tau2=50.0, m_of_soc=None):
    """Design matrix X (columns for r0, r1, r2) and target y with y = X @ r."""
    i = np.asarray(seg.current, dtype=float)
    ir1 = rc_currents(i, tau1, seg.dt, seg.ir0[0])
    ir2 = rc_currents(i, tau2, seg.dt, seg.ir0[1])
    base = np.interp(seg.soc, ocv.soc_breakpoints, ocv.v_mean)
    if seg.h is not None:
        m = m_of_soc(seg.soc) if m_of_soc is not None else np.interp(seg.soc, ocv.soc_breakpoints, ocv.m_table)
        base = base + m * seg.h
    X = -np.column_stack((i, ir1, ir2))
    return X, np.asarray(seg.voltage, dtype=float) - base


def ols_fit_pulse(seg: Segment, ocv: OCVData, tau1=2.0, tau2=50.0, m_of_soc=None, rcond=1e-8) -> ParamSet:
    """Fit r0, r1, r2 of one pulse-plus-rest segment with fixed time constants."""
    X, y = ols_system(seg, ocv, tau1, tau2, m_of_soc)
    _, sv, vt = np.linalg.svd(X, full_matrices=False)
    if sv[0] == 0 or sv[-1] <= rcond * sv[0]:
        raise RankDeficientError(vt[-1])
    r, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = np.clip(r, FIT_LOWER[:3], FIT_UPPER[:3])
    return ParamSet(float(r[0]), float(r[1]), float(r[2]), float(tau1), float(tau2))


# ---------------------------------------------------------------------------
# helpers shared by the table-level fits


@dataclass
class _Prepared:
    ds: Dataset
    z: np.ndarray
    h: np.ndarray | None
    windows: list


def _prepare(ds, cfg, z0, h0, gamma, hysteresis):
    z = soc_path(ds, cfg, z0)
    h = None
    if hysteresis:
        h = K.hysteresis_path(np.ascontiguousarray(ds.current, dtype=float), float(h0), float(gamma),
                              ds.dt, cfg.capacity_q, cfg.eta)
    return _Prepared(ds, z, h, segment_windows(ds, cfg, z))


def _simulate_measured(table, ocv, cfg, ds, z0, h0):
    x0 = np.array([z0, 0.0, 0.0, h0 if table.hysteresis_mode == "esc" else 0.0])
    cur, volt, states, done, flags = K.run_model(
        K.MODE_CURRENT, np.ascontiguousarray(ds.current, dtype=float), x0,
        table.soc_breakpoints, table.values, ocv.soc_breakpoints, ocv.v_mean,
        ds.dt, cfg.capacity_q, cfg.eta, -np.inf, np.inf, K.STOP_NONE)
    return volt, states


def _nearest(bp, soc):
    return int(np.argmin(np.abs(bp - soc)))


def _influencing(bp, z):
    """Breakpoints whose parameters enter the interpolated table anywhere along ``z``."""
    jj = np.clip(np.searchsorted(bp, z, side="right") - 1, 0, bp.size - 2)
    ww = np.clip((z - bp[jj]) / (bp[jj + 1] - bp[jj]), 0.0, 1.0)
    return sorted(set(jj[ww < 1].tolist()) | set((jj[ww > 0] + 1).tolist()))


def _evaluate(table, ocv, cfg, preps, inits):
    """Global and per-breakpoint voltage RMSE of ``table`` over the prepared datasets."""
    bp = table.soc_breakpoints
    sq = np.zeros(bp.size)
    cnt = np.zeros(bp.size)
    total, n = 0.0, 0
    for prep, (z0, h0) in zip(preps, inits):
        volt, _ = _simulate_measured(table, ocv, cfg, prep.ds, z0, h0)
        d2 = (volt - prep.ds.voltage) ** 2
        total += float(d2.sum())
        n += d2.size
        for w in prep.windows:
            b = _nearest(bp, w.mean_soc)
            sq[b] += d2[w.start:w.stop].sum()
            cnt[b] += w.stop - w.start
    with np.errstate(invalid="ignore", divide="ignore"):
        per = np.sqrt(sq / cnt)
    return math.sqrt(total / n), per


def _active_bounds(table, names=FIT_NAMES):
    out = []
    for s, row in zip(table.soc_breakpoints, table.values):
        for name in names:
            lo, hi = BOUNDS[name]
            val = row[PARAM_NAMES.index(name)]
            if val == lo or val == hi:
                out.append((float(s), name))
    return out


def hat_basis(bp, x):
    """Matrix B with B @ values = linear interpolation of ``values`` at ``x`` (clamped ends)."""
    x = np.clip(np.asarray(x, dtype=float), bp[0], bp[-1])
    j = np.clip(np.searchsorted(bp, x, side="right") - 1, 0, bp.size - 2)
    w = (x - bp[j]) / (bp[j + 1] - bp[j])
    B = np.zeros((x.size, bp.size))
    rows = np.arange(x.size)
    B[rows, j] = 1.0 - w
    B[rows, j + 1] += w
    return B


def project_onto_lut(bp, x, y):
    """Non-negative breakpoint values whose interpolant best fits (x, y) in least squares.

    Exact whenever ``y`` is itself piecewise linear on ``bp``.
    """
    values, _ = nnls(hat_basis(bp, x), np.asarray(y, dtype=float))
    return values


def build_lut_ols(gitt: Dataset, ocv: OCVData, cfg: CellConfig, hysteresis=False, *, z0=1.0, h0=1.0,
                  gamma0=50.0, tau1=2.0, tau2=50.0) -> FitReport:
    """One OLS fit per GITT pulse, tabulated at the pulse mid-SOC.

    With ``hysteresis`` the hysteresis state is simulated with the fixed rate
    ``gamma0`` and the m column is the OCV gap sampled at the breakpoints.
    """
    prep = _prepare(gitt, cfg, z0, h0, gamma0, hysteresis)
    wins = [w for w in prep.windows if w.direction > 0]
    socs = np.array([w.mean_soc for w in wins])
    order = np.argsort(socs)
    bp_all = socs[order]
    m_bp = np.interp(bp_all, ocv.soc_breakpoints, ocv.m_table) if hysteresis else np.zeros(bp_all.size)

    def m_of_soc(s):
        return np.interp(s, bp_all, m_bp)

    # RC branch currents at every window start from the whole prior history
    i_all = np.ascontiguousarray(gitt.current, dtype=float)
    ir1_all = rc_currents(i_all, tau1, gitt.dt)
    ir2_all = rc_currents(i_all, tau2, gitt.dt)
    rows, kept, notes = [], [], []
    for k in order:
        w = wins[k]
        sl = slice(w.start, w.stop)
        seg = Segment(gitt.current[sl], gitt.voltage[sl], prep.z[w.start:w.stop], gitt.dt,
                      prep.h[w.start:w.stop] if hysteresis else None, (ir1_all[w.start], ir2_all[w.start]))
        try:
            p = ols_fit_pulse(seg, ocv, tau1, tau2, m_of_soc if hysteresis else None)
        except RankDeficientError as exc:
            notes.append(f"pulse at soc {w.mean_soc:.4f} skipped: {exc}")
            continue
        rows.append([p.r0, p.r1, p.r2, tau1, tau2])
        kept.append(socs[k])
    if len(rows) < 2:
        raise IdentificationError(f"only {len(rows)} pulse fit(s) succeeded; need at least 2")
    bp = np.array(kept)
    keep = np.concatenate(([True], np.diff(bp) > 0))
    bp, rows = bp[keep], np.array(rows)[keep]
    if hysteresis:
        m_col = project_onto_lut(bp, ocv.soc_breakpoints, ocv.m_table)
        extra = np.column_stack((m_col, np.full(bp.size, float(gamma0))))
    else:
        extra = np.zeros((bp.size, 2))
    table = ParameterTable(bp, np.hstack((rows, extra)), "esc" if hysteresis else "none")
    g, per = _evaluate(table, ocv, cfg, [prep], [(z0, h0)])
    return FitReport(table, per, g, 0, _active_bounds(table, ("r0", "r1", "r2")), [], notes)


# ---------------------------------------------------------------------------
# nonlinear refinement


@dataclass
class _BreakpointData:
    """Concatenated windows of one breakpoint, run-length encoded; fixed while the table changes.

    A run is a stretch of samples with one interpolation row, weight and
    current (a whole rest is a single run).  ``e`` is measured voltage minus
    the OCV and hysteresis terms.
    """

    run_start: np.ndarray
    run_j: np.ndarray
    run_w: np.ndarray
    run_i: np.ndarray
    win_run: np.ndarray
    ir0: np.ndarray
    e: np.ndarray

    def _args(self):
        return (self.run_start, self.run_j, self.run_w, self.run_i, self.win_run, self.ir0, self.e)

    def residual(self, theta, b, fit, dt):
        return K.lut_residual(theta, b, fit, *self._args(), dt)

    def normal_eq(self, theta, b, fit, dt):
        return K.lut_normal_eq(theta, fd_steps(theta), b, fit, *self._args(), dt)


def _breakpoint_data(windows, bp, m_col, ocv):
    """``windows`` is a list of (prepared dataset, window, initial states)."""
    js, ws, cur, es, win_run, ir0 = [], [], [], [], [], []
    nrun = 0
    for prep, win, states in windows:
        sl = slice(win.start, win.stop)
        z = prep.z[sl]
        base = np.interp(z, ocv.soc_breakpoints, ocv.v_mean)
        if prep.h is not None:
            base = base + np.interp(z, bp, m_col) * prep.h[sl]
        jj = np.clip(np.searchsorted(bp, z, side="right") - 1, 0, bp.size - 2)
        ww = np.clip((z - bp[jj]) / (bp[jj + 1] - bp[jj]), 0.0, 1.0)
        ii = np.asarray(prep.ds.current[sl], dtype=float)
        es.append(prep.ds.voltage[sl] - base)
        win_run.append(nrun)
        ir0.append(states[win.start, 1:3])
        js.append(jj)
        ws.append(ww)
        cur.append(ii)
        change = np.ones(jj.size, dtype=bool)
        change[1:] = (jj[1:] != jj[:-1]) | (ww[1:] != ww[:-1]) | (ii[1:] != ii[:-1])
        nrun += int(change.sum())
    j = np.concatenate(js)
    w = np.concatenate(ws)
    i = np.concatenate(cur)
    lengths = np.cumsum([0] + [x.size for x in js])
    change = np.ones(j.size, dtype=bool)
    change[1:] = (j[1:] != j[:-1]) | (w[1:] != w[:-1]) | (i[1:] != i[:-1])
    change[lengths[:-1]] = True          # every window opens a run
    idx = np.flatnonzero(change)
    assert idx.size == nrun
    run_start = np.append(idx, j.size).astype(np.int64)
    return _BreakpointData(run_start, np.ascontiguousarray(j[idx], dtype=np.int64), np.ascontiguousarray(w[idx]),
                           np.ascontiguousarray(i[idx]), np.array(win_run, dtype=np.int64),
                           np.ascontiguousarray(np.array(ir0, dtype=float).reshape(-1, 2)),
                           np.ascontiguousarray(np.concatenate(es), dtype=float))


def nl_refine(init: ParameterTable, gitt: Dataset, charge_pulse: Dataset | None, ocv: OCVData, cfg: CellConfig,
              gamma=None, *, z0=(1.0, 1.0), h0=(1.0, 1.0), max_sweeps=40, sweep_tol=1e-7,
              max_iter=200, memory=6, start: ParameterTable | None = None) -> FitReport:
    """Refine r0, r1, r2, tau1, tau2 at every breakpoint for a fixed ``gamma``.

    A breakpoint is fitted on every pulse-plus-rest window (of both
    datasets) whose SOC range its interpolation weight reaches, with the
    rest of the table held at its latest values, so each solve is an exact
    block-coordinate step on the global cost.  Rests sit between
    breakpoints and neighbours share data; sweeps alternate between
    ascending and descending SOC order, with Anderson mixing, until no value
    moves by more than ``sweep_tol`` of its box width.  The init table is
    kept if the refined one fits the data worse overall.
    """
    hyst = init.hysteresis_mode == "esc"
    if hyst:
        gamma = float(init.values[0, 6] if gamma is None else gamma)
        init = init.with_column("gamma", np.full(len(init), gamma))
    datasets = [(gitt, z0[0], h0[0])]
    if charge_pulse is not None:
        datasets.append((charge_pulse, z0[1], h0[1]))
    preps = [_prepare(ds, cfg, z, h, gamma or 0.0, hyst) for ds, z, h in datasets]
    inits = [(z, h) for _, z, h in datasets]
    bp = init.soc_breakpoints

    init_global, init_per = _evaluate(init, ocv, cfg, preps, inits)
    assigned = {b: [] for b in range(bp.size)}
    for prep, (zz, hh) in zip(preps, inits):
        _, states = _simulate_measured(init, ocv, cfg, prep.ds, zz, hh)
        for w in prep.windows:
            for b in _influencing(bp, prep.z[w.start:w.stop]):
                assigned[b].append((prep, w, states))
    active = [b for b in range(bp.size) if assigned[b]]
    m_col = init.column("m")
    data = {b: _breakpoint_data(assigned[b], bp, m_col, ocv) for b in active}

    width = FIT_UPPER - FIT_LOWER
    order = active + active[-2::-1]
    dt = gitt.dt
    failed = set()
    counter = {"lm": 0}

    def sweep(u):
        """One ascending-then-descending pass of per-breakpoint solves (normalised coordinates)."""
        fit = np.ascontiguousarray(FIT_LOWER + u * width)
        for b in order:
            d = data[b]
            try:
                res = bounded_lsq(lambda th: d.residual(th, b, fit, dt), fit[b], FIT_LOWER, FIT_UPPER,
                                  normal=lambda th: d.normal_eq(th, b, fit, dt), max_iter=max_iter)
            except (FloatingPointError, np.linalg.LinAlgError) as exc:
                log.warning("breakpoint %.4f: refinement failed (%s)", bp[b], exc)
                failed.add(b)
                continue
            counter["lm"] += res.iterations
            fit[b] = res.x
        return (fit - FIT_LOWER) / width

    u0 = ((init if start is None else start).values[:, :5] - FIT_LOWER) / width
    fp = anderson_fixed_point(sweep, u0, memory=memory, tol=sweep_tol, max_iter=max_sweeps, lower=0.0, upper=1.0)
    fit = FIT_LOWER + fp.x * width
    iterations = counter["lm"]
    failed = {b for b in failed if b in active}

    if failed and len(failed) == sum(1 for b in assigned if assigned[b]):
        raise IdentificationError("nonlinear refinement failed at every breakpoint")
    vals = init.values.copy()
    vals[:, :5] = fit
    table = ParameterTable(bp, vals, init.hysteresis_mode)
    g, per = _evaluate(table, ocv, cfg, preps, inits)
    notes = [f"sweeps: {fp.iterations}"]
    if not g <= init_global:
        notes.append(f"refined table rejected: rmse {g:.6g} > init {init_global:.6g}")
        table, g, per = init, init_global, init_per
    return FitReport(table, per, g, iterations, _active_bounds(table), [float(bp[b]) for b in sorted(failed)], notes)


def optimise_gamma(init: ParameterTable, charge_pulse: Dataset, gitt: Dataset, ocv: OCVData, cfg: CellConfig,
                   *, tol=1.0, max_evals=40, z0=(1.0, 1.0), h0=(1.0, 1.0), search_sweep_tol=1e-5,
                   search_max_sweeps=8, sweep_tol=1e-7, max_sweeps=40):
    """Golden-section search of gamma on [0, 3000] over the refined-table RMSE.

    Each evaluation refines the table at that gamma, warm-started from the
    closest gamma already refined, to a looser sweep tolerance; the winner is
    then refined once more to full tolerance.  The final refinement counts
    against ``max_evals``.  Returns ``(gamma, report)``; the report notes when
    the RMSE is flat in gamma ("insensitive") and lists gamma as an active
    bound when the optimum sits on the box edge.
    """
    if init.hysteresis_mode != "esc":
        raise ValueError("gamma optimisation needs a hysteresis table")
    reports = {}

    def refine(g, **kw):
        near = min(reports, key=lambda x: (abs(x - g), x), default=None)
        return nl_refine(init, gitt, charge_pulse, ocv, cfg, g, z0=z0, h0=h0,
                         start=None if near is None else reports[near].table, **kw)

    def objective(g):
        rep = refine(g, sweep_tol=search_sweep_tol, max_sweeps=search_max_sweeps)
        reports[g] = rep
        log.info("gamma %.3f -> rmse %.6g (%s)", g, rep.global_rmse, rep.notes[0])
        return rep.global_rmse

    res = golden_section(objective, *GAMMA_BOUNDS, tol=tol, max_evals=max_evals - 1)
    rep = refine(res.x, sweep_tol=sweep_tol, max_sweeps=max_sweeps)
    if rep.global_rmse > reports[res.x].global_rmse:
        rep = reports[res.x]
    vals = [f for _, f in res.history]
    # with m == 0 everywhere gamma cannot enter the output at all
    if not np.any(init.column("m")) or max(vals) - min(vals) <= 1e-6 * max(vals) + 1e-12:
        rep.notes.append("insensitive: rmse does not depend on gamma")
    if res.at_bound:
        rep.active_bounds.append((float("nan"), "gamma"))
    rep.notes.append(f"gamma evaluations: {res.nfev + 1}")
    return res.x, rep
