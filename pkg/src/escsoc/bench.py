"""End-to-end synthetic benchmark: synthesise, identify, validate, estimate, report."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ekf as E
from . import ident
from . import protocols as P
from . import synth
from .config import RunConfig
from .data import Dataset, ensure_dir, write_ocv, write_table
from .model import CellConfig, CellState, OCVData, ParameterTable, simulate

log = logging.getLogger(__name__)

PLOT_KINDS = ("voltage_trace", "abs_error", "soc_trace", "rmse_bars")

# Experimental values published for physical cells.  They are carried in the
# report as context only and are never compared against.
REFERENCE_CONTEXT = {
    "note": "measured on physical cells with proprietary data; context only, not asserted",
    "voltage_rmse_mV": {"ECM": 7.0, "ECM-opt": 6.0, "ECMh": 4.9, "ECMh-opt": 3.0},
    "adaptive_soc_error_reduction": 0.85,
    "coulomb_end_of_cycle_error": 0.0029,
}


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and partial artefacts stay on disk."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(name):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def _h0(table: ParameterTable):
    return 1.0 if table.hysteresis_mode == "esc" else 0.0


# ---------------------------------------------------------------------------
# per-cell work items


@dataclass
class CellFit:
    name: str
    ocv: OCVData
    tables: dict                    # model name -> ParameterTable
    fit_rmse: dict                  # model name -> RMSE on the identification data (V)
    gamma: float | None = None


def drive_trace(rc: RunConfig, seed):
    """Power trace for one drive block: the configured file or the bundled stand-in."""
    dt = rc.cell.dt
    n = int(round(rc.protocols.drive.block_hours * 3600 / dt))
    if rc.protocols.drive_trace is not None:
        vals = np.loadtxt(rc.protocols.drive_trace, delimiter=",", ndmin=1, comments="#")
        return np.asarray(vals, dtype=float).ravel()
    return P.pseudo_drive_trace(n * dt, dt, seed=seed)


def identify_cell(cell: synth.TruthCell, rc: RunConfig, seeds, models) -> CellFit:
    """Run the three GITT-family protocols on ``cell`` and fit the requested models."""
    cfg = rc.cell
    pr = rc.protocols
    s_ocv, s_gitt, s_cp = seeds
    ocv_run = synth.synthesize(cell, P.gen_gitt_ocv(pr.gitt_ocv, cfg), rc.ident_sensors, s_ocv)
    dis, chg, z_chg = ident.split_ocv_run(ocv_run, cfg, 1.0)
    ocv = ident.extract_ocv(dis, chg, cfg, 1.0, z_chg)
    gitt = synth.synthesize(cell, P.gen_gitt(pr.gitt, cfg), rc.ident_sensors, s_gitt)
    cp = synth.synthesize(cell, P.gen_gitt_charge_pulse(pr.charge_pulse, cfg), rc.ident_sensors, s_cp)
    it = rc.ident
    tables, rmse = {}, {}
    gamma = None
    if {"ECM", "ECM-opt"} & set(models):
        rep = ident.build_lut_ols(gitt, ocv, cfg, False, tau1=it.tau1, tau2=it.tau2)
        tables["ECM"], rmse["ECM"] = rep.table, rep.global_rmse
        if "ECM-opt" in models:
            rep = ident.nl_refine(rep.table, gitt, cp, ocv, cfg, sweep_tol=it.sweep_tol)
            tables["ECM-opt"], rmse["ECM-opt"] = rep.table, rep.global_rmse
    if {"ECMh", "ECMh-opt"} & set(models):
        rep = ident.build_lut_ols(gitt, ocv, cfg, True, gamma0=it.gamma0, tau1=it.tau1, tau2=it.tau2)
        tables["ECMh"], rmse["ECMh"] = rep.table, rep.global_rmse
        if "ECMh-opt" in models:
            gamma, rep = ident.optimise_gamma(rep.table, cp, gitt, ocv, cfg, tol=it.gamma_tol,
                                              max_evals=it.max_gamma_evals, sweep_tol=it.sweep_tol)
            tables["ECMh-opt"], rmse["ECMh-opt"] = rep.table, rep.global_rmse
    tables = {m: tables[m] for m in models}
    rmse = {m: rmse[m] for m in models}
    return CellFit(cell.name, ocv, tables, rmse, gamma)


@dataclass
class VoltageRun:
    """Measured and model-predicted terminal voltage over one validation run."""

    name: str
    dt: float
    v_meas: np.ndarray
    v_model: np.ndarray

    @property
    def rmse(self):
        return ident.rmse(self.v_model, self.v_meas)


def validate_model(table: ParameterTable, ocv: OCVData, cfg: CellConfig, meas: Dataset, name="") -> VoltageRun:
    """Drive the model with the measured current from a rested full cell and compare voltages."""
    sim = simulate(table, ocv, cfg.with_dt(meas.dt), meas.current, CellState(1.0, 0.0, 0.0, _h0(table)))
    return VoltageRun(name, meas.dt, meas.voltage[: sim.n_done], sim.voltage)


def initial_state(meas: Dataset, ocv: OCVData, table: ParameterTable, rest_seconds) -> CellState:
    """x0 from OCV inversion of the averaged lead-rest voltage."""
    n = max(1, int(round(rest_seconds / meas.dt)))
    h = _h0(table)
    z = E.soc_from_rest_voltage(float(np.mean(meas.voltage[:n])), ocv, h)
    return CellState(z, 0.0, 0.0, h)


# ---------------------------------------------------------------------------
# report


@dataclass
class BenchmarkReport:
    config_hash: str
    seed: int
    models: list
    schemes: list
    cells: list
    voltage_rmse: dict              # "model|cell" -> V
    soc_rmse: dict                  # "model|scheme|cell" -> fraction
    soc_end_error: dict             # "model|scheme|cell" -> fraction
    soc_block_means: dict = field(default_factory=dict)     # "model|scheme|cell" -> hourly mean |error|
    fits: dict = field(default_factory=dict)                # cell -> {"gamma", "fit_rmse"}
    reference_context: dict = field(default_factory=lambda: dict(REFERENCE_CONTEXT))

    def entries(self):
        """One row per (model, scheme, cell)."""
        rows = []
        for m in self.models:
            for s in self.schemes:
                for c in self.cells:
                    k = f"{m}|{s}|{c}"
                    rows.append({"model": m, "scheme": s, "cell": c,
                                 "voltage_rmse": self.voltage_rmse[f"{m}|{c}"],
                                 "soc_rmse": self.soc_rmse[k], "soc_end_error": self.soc_end_error[k]})
        return rows

    def soc_summary(self):
        """(model, scheme) -> (mean, min, max) of the per-cell SOC RMS error."""
        out = {}
        for m in self.models:
            for s in self.schemes:
                v = np.array([self.soc_rmse[f"{m}|{s}|{c}"] for c in self.cells])
                out[(m, s)] = (float(v.mean()), float(v.min()), float(v.max()))
        return out

    def voltage_summary(self):
        """model -> (mean, min, max) of the per-cell validation voltage RMSE."""
        out = {}
        for m in self.models:
            v = np.array([self.voltage_rmse[f"{m}|{c}"] for c in self.cells])
            out[m] = (float(v.mean()), float(v.min()), float(v.max()))
        return out

    def to_dict(self):
        return {
            "config_hash": self.config_hash, "seed": self.seed, "models": list(self.models),
            "schemes": list(self.schemes), "cells": list(self.cells),
            "voltage_rmse": self.voltage_rmse, "soc_rmse": self.soc_rmse, "soc_end_error": self.soc_end_error,
            "soc_block_means": self.soc_block_means, "fits": self.fits,
            "summary": {
                "voltage_rmse": {m: dict(zip(("mean", "min", "max"), v)) for m, v in self.voltage_summary().items()},
                "soc_rmse": {f"{m}|{s}": dict(zip(("mean", "min", "max"), v))
                             for (m, s), v in self.soc_summary().items()},
            },
            "reference_context": self.reference_context,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(d["config_hash"], d["seed"], d["models"], d["schemes"], d["cells"], d["voltage_rmse"],
                   d["soc_rmse"], d["soc_end_error"], d.get("soc_block_means", {}), d.get("fits", {}),
                   d.get("reference_context", dict(REFERENCE_CONTEXT)))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class BenchmarkResult:
    """The report plus the in-memory runs behind it (for plot data)."""

    report: BenchmarkReport
    fits: list
    voltage_runs: dict = field(default_factory=dict)   # (model, cell) -> VoltageRun
    soc_runs: dict = field(default_factory=dict)       # (model, scheme, cell) -> SocRunReport


def block_means(err, dt, hours=1.0):
    """Mean of ``err`` over consecutive whole blocks of ``hours``."""
    n = int(round(hours * 3600 / dt))
    k = len(err) // n
    return np.asarray(err[: k * n]).reshape(k, n).mean(axis=1)


def _identify_item(args):
    cell, rc, seeds, models = args
    return identify_cell(cell, rc, seeds, models)


def run_pipeline(rc: RunConfig, write=True, keep_runs=False) -> BenchmarkResult:
    """Synthesise ``n_cells`` truth cells, identify every model, validate and estimate.

    Artefacts (effective config, per-cell OCV and tables, report) go to
    ``rc.output_dir`` as soon as each stage produces them when ``write``.
    """
    cfg = rc.cell
    out = ensure_dir(rc.output_dir) if write else None
    if out is not None:
        (out / "effective_config.yaml").write_text(rc.to_yaml())
    root = np.random.SeedSequence(rc.seed)
    s_cells, s_trace, *s_items = root.spawn(2 + rc.n_cells)
    models = list(rc.models)

    with _stage("synthesise"):
        t = rc.truth
        spec = synth.TruthCellSpec.default(t.m_peak, t.gamma, t.spread, cfg, t.q_spread).validate()
        cells = synth.make_cells(spec, rc.n_cells, s_cells)
        item_seeds = [s.spawn(5) for s in s_items]     # ocv, gitt, charge pulse, validation, drive

    with _stage("identify"):
        work = [(c, rc, seeds[:3], models) for c, seeds in zip(cells, item_seeds)]
        if rc.workers > 1 and len(work) > 1:
            with ProcessPoolExecutor(max_workers=min(rc.workers, len(work))) as pool:
                fits = list(pool.map(_identify_item, work))
        else:
            fits = [_identify_item(w) for w in work]
        if out is not None:
            for f in fits:
                d = ensure_dir(out / f.name)
                write_ocv(f.ocv, d / "ocv.csv")
                for m, tab in f.tables.items():
                    write_table(tab, d / f"table_{m}.csv")

    drive_cfg = rc.protocols.drive
    result = BenchmarkResult(None, fits)
    voltage_rmse = {}
    with _stage("validate"):
        trace = drive_trace(rc, rc.protocols.validation_trace_seed)
        prof = P.gen_drive_cycle(trace, drive_cfg, cfg)
        for cell, fit, seeds in zip(cells, fits, item_seeds):
            meas = synth.synthesize(cell, prof, rc.ident_sensors, seeds[3])
            for m in models:
                run = validate_model(fit.tables[m], fit.ocv, cfg, meas, f"{m}|{cell.name}")
                voltage_rmse[f"{m}|{cell.name}"] = run.rmse
                if keep_runs:
                    result.voltage_runs[(m, cell.name)] = run

    soc_rmse, soc_end, blocks = {}, {}, {}
    with _stage("estimate"):
        trace = drive_trace(rc, rc.protocols.drive_trace_seed)
        prof = P.gen_drive_cycle(trace, drive_cfg, cfg)
        gitt_ref = P.gen_gitt(rc.protocols.gitt, cfg).values
        sens = rc.drive_sensors
        meas = [synth.synthesize(c, prof, sens, seeds[4]) for c, seeds in zip(cells, item_seeds)]
        sigma0 = np.diag(np.asarray(rc.ekf.sigma0, dtype=float))
        for m in models:
            tabs = [f.tables[m] for f in fits]
            soc, pv = E.parameter_variances(tabs, ocvs=[f.ocv for f in fits], nominal_q=cfg.capacity_q,
                                            floor_rel=rc.ekf.variance_floor_rel,
                                            ocv_floor=sens.voltage_lsb ** 2 / 12 or 1e-12)
            for cell, fit, ds in zip(cells, fits, meas):
                tab = fit.tables[m]
                noise = E.build_noise_config(tab, fit.ocv, cfg, sens.voltage_variance, sens.current_variance, soc,
                                             pv, gitt_ref, CellState(1.0, 0.0, 0.0, _h0(tab)))
                if out is not None:
                    (out / cell.name / f"noise_{m}.json").write_text(json.dumps(noise.to_dict(), sort_keys=True))
                x0 = initial_state(ds, fit.ocv, tab, rc.ekf.init_rest_seconds)
                for s in rc.schemes:
                    r = E.estimate_soc_run(prof, ds, tab, fit.ocv, cfg, s, noise, x0, sigma0)
                    key = f"{m}|{s}|{cell.name}"
                    soc_rmse[key] = r.rms_error
                    soc_end[key] = r.end_error
                    blocks[key] = block_means(r.abs_error, ds.dt).tolist()
                    if keep_runs:
                        result.soc_runs[(m, s, cell.name)] = r

    with _stage("report"):
        fit_info = {f.name: {"gamma": f.gamma, "fit_rmse": f.fit_rmse} for f in fits}
        report = BenchmarkReport(rc.content_hash(), rc.seed, models, list(rc.schemes), [c.name for c in cells],
                                 voltage_rmse, soc_rmse, soc_end, blocks, fit_info)
        result.report = report
        if out is not None:
            (out / "report.json").write_text(report.to_json())
            emit_plotdata(report, "rmse_bars", out / "rmse_bars_soc.csv")
            emit_plotdata(report, "rmse_bars", out / "rmse_bars_voltage.csv", metric="voltage")
    return result


# ---------------------------------------------------------------------------
# plot data


class PlotDataError(ValueError):
    """Unknown plot kind or unusable input."""


def _tidy(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return Path(path)


def emit_plotdata(obj, kind, path, metric="soc"):
    """Write a long-format CSV (series, x, y) for one figure kind.

    ``voltage_trace`` takes a :class:`VoltageRun`; ``abs_error`` and
    ``soc_trace`` take a :class:`~escsoc.ekf.SocRunReport`; ``rmse_bars``
    takes a :class:`BenchmarkReport` and writes one row per (model, scheme)
    with mean/min/max columns (per model for ``metric="voltage"``).
    """
    if kind not in PLOT_KINDS:
        raise PlotDataError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    if kind == "rmse_bars":
        if not isinstance(obj, BenchmarkReport):
            raise PlotDataError("rmse_bars needs a benchmark report")
        if not obj.cells or not obj.models:
            raise PlotDataError("report has no entries")
        if metric == "soc":
            rows = [(s, m, v[0], v[0], v[1], v[2]) for (m, s), v in obj.soc_summary().items()]
        elif metric == "voltage":
            rows = [("voltage_rmse", m, v[0], v[0], v[1], v[2]) for m, v in obj.voltage_summary().items()]
        else:
            raise PlotDataError(f"unknown metric {metric!r}")
        return _tidy(path, ("series", "x", "y", "mean", "min", "max"), rows)
    if kind == "voltage_trace":
        if not isinstance(obj, VoltageRun):
            raise PlotDataError("voltage_trace needs a voltage run")
        n = len(obj.v_model)
        if n == 0:
            raise PlotDataError("empty run")
        t = np.arange(n) * obj.dt
        rows = [("measured", t[k], obj.v_meas[k]) for k in range(n)]
        rows += [("model", t[k], obj.v_model[k]) for k in range(n)]
        return _tidy(path, ("series", "x", "y"), rows)
    if not isinstance(obj, E.SocRunReport):
        raise PlotDataError(f"{kind} needs an SOC run report")
    n = len(obj.soc)
    if n == 0:
        raise PlotDataError("empty run")
    t = np.arange(n) * obj.dt
    if kind == "abs_error":
        if obj.abs_error is None:
            raise PlotDataError("run carries no true SOC, so no error series")
        return _tidy(path, ("series", "x", "y"), [(obj.scheme, t[k], obj.abs_error[k]) for k in range(n)])
    rows = [(obj.scheme, t[k], obj.soc[k]) for k in range(n)]
    if obj.true_soc is not None:
        rows += [("true", t[k], obj.true_soc[k]) for k in range(n)]
    return _tidy(path, ("series", "x", "y"), rows)
