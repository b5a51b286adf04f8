"""Command-line tools; every command reads and writes plain files only.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bench, ident, synth
from . import ekf as E
from . import protocols as P
from .config import ENV_OUTPUT_DIR, ConfigError, build_dataclass, load_config
from .data import DataError, ingest_dataset, read_ocv, read_table, write_dataset, write_ocv, write_table
from .model import CellConfig, CellState, NonFiniteInputError, PowerInfeasibleError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("escsoc")


def _exit_code(exc):
    if isinstance(exc, bench.PipelineError):
        return _exit_code(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (FloatingPointError, np.linalg.LinAlgError, ident.IdentificationError,
                        PowerInfeasibleError, NonFiniteInputError, ArithmeticError)):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, OSError, KeyError, ValueError)):
        return EXIT_DATA
    return None


def _run(func, args):
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


def _cell_args(p):
    p.add_argument("--capacity-ah", type=float, default=5.0, help="nominal capacity (Ah)")
    p.add_argument("--dt", type=float, default=None, help="sample period (s); default: the data's")
    p.add_argument("-v", "--verbose", action="store_true")


def _cell(args, dt):
    return CellConfig(capacity_q=args.capacity_ah * 3600.0, dt=dt if args.dt is None else args.dt)


# ---------------------------------------------------------------------------
# socgen


PROTOCOL_CONFIGS = {"gitt": P.GittConfig, "gitt-ocv": P.GittOcvConfig, "charge-pulse": P.ChargePulseConfig,
                    "drive": P.DriveConfig}


def _socgen_settings(args):
    """Protocol dataclass, cell config and drive-trace options from flags and an optional YAML file.

    The YAML may hold ``cell`` (CellConfig fields), ``protocol`` (fields of the
    chosen protocol's config), ``trace`` and ``trace_seed``.  Flags given on the
    command line only fill what the file leaves unset.
    """
    data = {}
    if args.config:
        try:
            data = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{args.config}: invalid YAML: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: expected a mapping")
        unknown = sorted(set(data) - {"cell", "protocol", "trace", "trace_seed"})
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {unknown}")
    cell_data = {"capacity_q": args.capacity_ah * 3600.0, "dt": 0.1 if args.dt is None else args.dt}
    cell_data.update(data.get("cell") or {})
    cell = build_dataclass(CellConfig, cell_data, "cell")
    proto_data = {}
    if args.reset:
        proto_data["reset"] = {}
    if args.protocol == "drive":
        proto_data.update(blocks=args.blocks, trailing_rest=args.trailing_rest,
                          lead_rest_minutes=args.lead_rest_minutes)
    proto_data.update(data.get("protocol") or {})
    proto = build_dataclass(PROTOCOL_CONFIGS[args.protocol], proto_data, "protocol")
    trace = data.get("trace", args.trace)
    trace_seed = data.get("trace_seed", args.trace_seed)
    return proto, cell, trace, trace_seed


def _socgen(args):
    proto, cell, trace_path, trace_seed = _socgen_settings(args)
    if args.protocol == "gitt":
        prof = P.gen_gitt(proto, cell)
    elif args.protocol == "gitt-ocv":
        prof = P.gen_gitt_ocv(proto, cell)
    elif args.protocol == "charge-pulse":
        prof = P.gen_gitt_charge_pulse(proto, cell)
    else:
        if trace_path:
            trace = np.loadtxt(trace_path, delimiter=",", ndmin=1, comments="#").ravel()
        else:
            trace = P.pseudo_drive_trace(proto.block_hours * 3600.0, cell.dt, seed=trace_seed)
        prof = P.gen_drive_cycle(trace, proto, cell)
    if args.out in (None, "-"):
        P.write_profile(prof, sys.stdout)
        return
    P.write_profile(prof, args.out)
    print(f"{args.out}: {len(prof)} samples, {prof.duration / 3600:.2f} h, {prof.mode} mode")


def socgen_parser():
    p = argparse.ArgumentParser(prog="socgen", description="Generate a load profile CSV.")
    p.add_argument("protocol", choices=tuple(PROTOCOL_CONFIGS))
    p.add_argument("--config", help="YAML with cell, protocol, trace and trace_seed entries")
    p.add_argument("--out", help="output CSV; omit or '-' for stdout")
    p.add_argument("--reset", action="store_true", help="prepend a CC-CV charge and rest")
    p.add_argument("--trace", help="drive power trace CSV (W at dt); default: bundled stand-in")
    p.add_argument("--trace-seed", type=int, default=11)
    p.add_argument("--blocks", type=int, default=10)
    p.add_argument("--trailing-rest", action="store_true")
    p.add_argument("--lead-rest-minutes", type=float, default=0.0)
    _cell_args(p)
    return p


def socgen(argv=None):
    args = socgen_parser().parse_args(argv)
    return _run(_socgen, args)


# ---------------------------------------------------------------------------
# socsynth


def _socsynth(args):
    prof = P.read_profile(args.profile)
    cfg = _cell(args, prof.dt)
    spec = synth.TruthCellSpec.default(args.m_peak, args.gamma, args.spread, cfg).validate()
    if not 0 <= args.cell_index < args.n_cells:
        raise ConfigError(f"--cell-index must lie in [0, {args.n_cells})")
    cell = synth.make_cells(spec, args.n_cells, args.cell_seed)[args.cell_index]
    sensors = synth.SensorModel(args.v_noise, args.i_noise, args.i_bias)
    ds = synth.synthesize(cell, prof, sensors, args.seed)
    write_dataset(ds, args.out, with_truth=args.with_truth)
    for idx, note in ds.annotations:
        print(f"note: sample {idx}: {note}")
    if args.truth_table:
        write_table(cell.table, args.truth_table)
    if args.truth_ocv:
        write_ocv(cell.ocv, args.truth_ocv)
    print(f"{args.out}: {len(ds)} samples")


def socsynth_parser():
    p = argparse.ArgumentParser(prog="socsynth", description="Synthesise a measured dataset from a truth cell.")
    p.add_argument("--profile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True, help="sensor noise seed")
    p.add_argument("--cell-seed", type=int, default=0, help="seed of the cell population")
    p.add_argument("--n-cells", type=int, default=1)
    p.add_argument("--cell-index", type=int, default=0)
    p.add_argument("--m-peak", type=float, default=0.030)
    p.add_argument("--gamma", type=float, default=100.0)
    p.add_argument("--spread", type=float, default=0.0)
    p.add_argument("--v-noise", type=float, default=0.0, help="voltage noise sd (V)")
    p.add_argument("--i-noise", type=float, default=0.0, help="current noise sd (A)")
    p.add_argument("--i-bias", type=float, default=0.0, help="current bias (A)")
    p.add_argument("--with-truth", action="store_true")
    p.add_argument("--truth-table", help="also write the truth parameter table here")
    p.add_argument("--truth-ocv", help="also write the truth OCV table here")
    _cell_args(p)
    return p


def socsynth(argv=None):
    return _run(_socsynth, socsynth_parser().parse_args(argv))


# ---------------------------------------------------------------------------
# socfit


def _write_report(rep, path):
    if path:
        Path(path).write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")


def _socfit(args):
    if args.stage == "ocv":
        ds = ingest_dataset(args.data)
        cfg = _cell(args, ds.dt)
        dis, chg, zc = ident.split_ocv_run(ds, cfg, args.z0)
        ocv = ident.extract_ocv(dis, chg, cfg, args.z0, zc)
        write_ocv(ocv, args.out)
        print(f"{args.out}: {len(ocv.soc_breakpoints)} points, max gap {2 * ocv.m_table.max() * 1e3:.1f} mV")
        return
    if not (args.gitt and args.ocv):
        raise ConfigError(f"socfit {args.stage} needs --gitt and --ocv")
    gitt = ingest_dataset(args.gitt)
    ocv = read_ocv(args.ocv)
    cfg = _cell(args, gitt.dt)
    cp = ingest_dataset(args.charge_pulse) if args.charge_pulse else None
    if args.stage == "ols":
        rep = ident.build_lut_ols(gitt, ocv, cfg, args.hysteresis, gamma0=args.gamma0, z0=args.z0)
    else:
        if not args.init:
            raise ConfigError(f"socfit {args.stage} needs --init")
        init = read_table(args.init)
        if args.stage == "refine":
            rep = ident.nl_refine(init, gitt, cp, ocv, cfg, args.gamma)
        else:
            if cp is None:
                raise ConfigError("socfit gamma needs --charge-pulse")
            g, rep = ident.optimise_gamma(init, cp, gitt, ocv, cfg)
            print(f"gamma = {g:.4g}")
    write_table(rep.table, args.out)
    _write_report(rep, args.report)
    print(f"{args.out}: rmse {rep.global_rmse * 1e3:.3f} mV")
    for note in rep.notes:
        print(f"note: {note}")


def socfit_parser():
    p = argparse.ArgumentParser(prog="socfit", description="Identify OCV and ESC parameter tables.")
    p.add_argument("stage", choices=("ocv", "ols", "refine", "gamma"))
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="GITT-for-OCV dataset (stage ocv)")
    p.add_argument("--gitt", help="GITT dataset")
    p.add_argument("--charge-pulse", help="GITT-with-charge-pulse dataset")
    p.add_argument("--ocv", help="OCV table CSV")
    p.add_argument("--init", help="starting parameter table (refine, gamma)")
    p.add_argument("--hysteresis", action="store_true", help="fit the ESC hysteresis model (ols)")
    p.add_argument("--gamma0", type=float, default=50.0)
    p.add_argument("--gamma", type=float, default=None, help="fixed gamma for refine")
    p.add_argument("--z0", type=float, default=1.0, help="SOC at the start of the data")
    p.add_argument("--report", help="write the fit report JSON here")
    _cell_args(p)
    return p


def socfit(argv=None):
    return _run(_socfit, socfit_parser().parse_args(argv))


# ---------------------------------------------------------------------------
# socest


STEP_COLUMNS = ("time_s", "soc", "soc_sd", "current_a", "flags", "true_soc", "abs_error")


def write_steps(rep: E.SocRunReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STEP_COLUMNS)
        n = len(rep.soc)
        for k in range(n):
            truth = (repr(float(rep.true_soc[k])), repr(float(rep.abs_error[k]))) if rep.true_soc is not None else ("", "")
            w.writerow((repr(k * rep.dt), repr(float(rep.soc[k])), repr(float(rep.soc_sd[k])),
                        repr(float(rep.current[k])), int(rep.flags[k])) + truth)


def read_steps(path, scheme="") -> E.SocRunReport:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != STEP_COLUMNS:
            raise DataError(f"{path}: expected header {list(STEP_COLUMNS)}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: empty run")
    try:
        t = np.array([float(r[0]) for r in rows])
        cols = [np.array([float(r[c]) for r in rows]) for c in (1, 2, 3)]
        flags = np.array([int(r[4]) for r in rows], dtype=np.int64)
        has_truth = all(r[5] != "" for r in rows)
        true = np.array([float(r[5]) for r in rows]) if has_truth else None
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from None
    dt = float(t[1] - t[0]) if t.size > 1 else 1.0
    rep = E.SocRunReport(scheme or Path(path).stem, cols[0], cols[2], cols[1], flags, dt=dt)
    if true is not None:
        rep.true_soc = true
        rep.abs_error = np.abs(rep.soc - true)
    return rep


def _socest(args):
    scheme = E.SCHEME_ALIASES.get(args.scheme, args.scheme)
    ds = ingest_dataset(args.data)
    table = read_table(args.model)
    ocv = read_ocv(args.ocv)
    cfg = _cell(args, ds.dt)
    if args.noise:
        try:
            noise = E.NoiseConfig.from_dict(json.loads(Path(args.noise).read_text()))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{args.noise}: malformed noise config ({exc})") from None
    elif scheme == "coulomb":
        noise = E.NoiseConfig(1e-6, np.zeros((4, 4)), 0.0, 1e-6)
    else:
        raise ConfigError(f"scheme {args.scheme} needs --noise")
    h0 = args.h0 if args.h0 is not None else (1.0 if table.hysteresis_mode == "esc" else 0.0)
    if args.z0 is not None:
        x0 = CellState(args.z0, 0.0, 0.0, h0)
    else:
        n = max(1, int(round(args.init_rest_seconds / ds.dt)))
        x0 = CellState(E.soc_from_rest_voltage(float(np.mean(ds.voltage[:n])), ocv, h0), 0.0, 0.0, h0)
    rep = E.estimate_soc_run(None, ds, table, ocv, cfg, scheme, noise, x0)
    out = Path(args.out)
    out.write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
    if args.steps:
        write_steps(rep, args.steps)
    print(json.dumps(rep.to_dict(), sort_keys=True))


def socest_parser():
    p = argparse.ArgumentParser(prog="socest", description="Estimate SOC over a measured power-driven run.")
    p.add_argument("--scheme", required=True, choices=("coulomb", "const-ekf", "adaptive-ekf"))
    p.add_argument("--model", required=True, help="parameter table CSV")
    p.add_argument("--ocv", required=True, help="OCV table CSV")
    p.add_argument("--noise", help="noise config JSON (required for the EKF schemes)")
    p.add_argument("--data", required=True, help="measured dataset CSV")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--steps", help="per-step CSV for plotting")
    p.add_argument("--z0", type=float, default=None, help="initial SOC; default: OCV inversion of the lead rest")
    p.add_argument("--h0", type=float, default=None)
    p.add_argument("--init-rest-seconds", type=float, default=600.0)
    _cell_args(p)
    return p


def socest(argv=None):
    return _run(_socest, socest_parser().parse_args(argv))


# ---------------------------------------------------------------------------
# socbench


def _socbench(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.cells is not None:
        overrides["n_cells"] = args.cells
    env = dict(os.environ)
    if args.out is not None:
        overrides["output_dir"] = args.out
        env.pop(ENV_OUTPUT_DIR, None)      # an explicit flag beats the environment
    rc = load_config(args.config, overrides, env)
    if args.print_effective_config:
        sys.stdout.write(rc.to_yaml())
        return
    res = bench.run_pipeline(rc, write=True, keep_runs=args.traces)
    out = Path(rc.output_dir)
    if args.traces:
        for (m, c), run in res.voltage_runs.items():
            bench.emit_plotdata(run, "voltage_trace", out / c / f"voltage_trace_{m}.csv")
        for (m, s, c), run in res.soc_runs.items():
            write_steps(run, out / c / f"steps_{m}_{s}.csv")
    rep = res.report
    print(f"report: {out / 'report.json'} (config {rep.config_hash[:12]})")
    print("validation voltage RMSE (mV): " + ", ".join(f"{m} {v[0] * 1e3:.2f}" for m, v in rep.voltage_summary().items()))
    for (m, s), v in rep.soc_summary().items():
        print(f"SOC RMS {m:9s} {s:13s} mean {v[0] * 100:.3f}%  min {v[1] * 100:.3f}%  max {v[2] * 100:.3f}%")


def socbench_parser():
    p = argparse.ArgumentParser(prog="socbench", description="Run the full synthetic benchmark.")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--cells", type=int, help="override the number of cells")
    p.add_argument("--out", help=f"output directory (else config, else ${ENV_OUTPUT_DIR})")
    p.add_argument("--traces", action="store_true", help="also write per-run trace CSVs")
    p.add_argument("--print-effective-config", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def socbench(argv=None):
    return _run(_socbench, socbench_parser().parse_args(argv))


# ---------------------------------------------------------------------------
# socplot


def read_voltage_trace(path) -> bench.VoltageRun:
    """Load a voltage_trace CSV (series measured/model) back into a run."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["series", "x", "y"]:
            raise DataError(f"{path}: not a voltage trace file")
        series = {}
        for r in reader:
            series.setdefault(r[0], []).append((float(r[1]), float(r[2])))
    if not series.get("model"):
        raise DataError(f"{path}: empty run")
    t = [x for x, _ in series["model"]]
    dt = t[1] - t[0] if len(t) > 1 else 1.0
    return bench.VoltageRun(Path(path).stem, dt, np.array([y for _, y in series["measured"]]),
                            np.array([y for _, y in series["model"]]))


def _socplot(args):
    if args.kind not in bench.PLOT_KINDS:
        raise ConfigError(f"unknown plot kind {args.kind!r}; expected one of {bench.PLOT_KINDS}")
    if args.kind == "rmse_bars":
        try:
            obj = bench.BenchmarkReport.load(args.input)
        except (KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"{args.input}: not a benchmark report ({exc})") from None
    elif args.kind == "voltage_trace":
        obj = read_voltage_trace(args.input)
    else:
        obj = read_steps(args.input)
    bench.emit_plotdata(obj, args.kind, args.out, metric=args.metric)
    print(args.out)


def socplot_parser():
    p = argparse.ArgumentParser(prog="socplot", description="Write tidy plot data (series, x, y).")
    p.add_argument("--kind", required=True, help=f"one of {', '.join(bench.PLOT_KINDS)}")
    p.add_argument("--input", required=True, help="report JSON, socest steps CSV, or voltage trace CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--metric", choices=("soc", "voltage"), default="soc", help="rmse_bars metric")
    return p


def socplot(argv=None):
    return _run(_socplot, socplot_parser().parse_args(argv))


COMMANDS = {"socgen": socgen, "socsynth": socsynth, "socfit": socfit, "socest": socest, "socbench": socbench,
            "socplot": socplot}


def main(argv=None):
    """``python -m escsoc <command> ...`` dispatcher."""
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS:
        print(f"usage: python -m escsoc {{{','.join(COMMANDS)}}} ...", file=sys.stderr)
        return EXIT_CONFIG
    return COMMANDS[argv[0]](argv[1:])
