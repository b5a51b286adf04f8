"""Time-series containers and the plain-text table formats.

All CSV writers emit floats with ``repr`` so files round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import PARAM_NAMES, OCVData, ParameterTable

log = logging.getLogger(__name__)

LABELS = ("pulse_discharge", "pulse_charge", "rest", "cv_hold", "drive")
LABEL_CODE = {name: k for k, name in enumerate(LABELS)}
REST = LABEL_CODE["rest"]

DATASET_COLUMNS = ("time_s", "current_a", "voltage_v", "power_w", "label")
TABLE_COLUMNS = ("soc",) + PARAM_NAMES
OCV_COLUMNS = ("soc", "v_charge", "v_discharge")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Truth:
    """Noise-free side channel retained by the synthesiser."""

    soc: np.ndarray              # z_k before sample k is applied
    current: np.ndarray
    voltage: np.ndarray
    states: np.ndarray           # (n + 1, 4)


@dataclass
class Dataset:
    dt: float
    current: np.ndarray
    voltage: np.ndarray
    power: np.ndarray
    labels: np.ndarray           # int8 codes into LABELS
    t0: float = 0.0
    truth: Truth | None = field(default=None, repr=False)
    annotations: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.current)
        for name in ("voltage", "power", "labels"):
            if len(getattr(self, name)) != n:
                raise DataError(f"{name} length {len(getattr(self, name))} != {n}")

    def __len__(self):
        return len(self.current)

    @property
    def time(self):
        return self.t0 + np.arange(len(self)) * self.dt

    @property
    def true_soc(self):
        if self.truth is None:
            raise DataError("dataset carries no truth channel")
        return self.truth.soc

    def label_names(self):
        return [LABELS[c] for c in self.labels]

    def slice(self, start, stop):
        truth = None
        if self.truth is not None:
            t = self.truth
            truth = Truth(t.soc[start:stop], t.current[start:stop], t.voltage[start:stop], t.states[start:stop + 1])
        return Dataset(self.dt, self.current[start:stop], self.voltage[start:stop], self.power[start:stop],
                       self.labels[start:stop], self.t0 + start * self.dt, truth)

    def without_truth(self):
        return replace(self, truth=None)


def _fmt(x):
    return repr(float(x))


def write_dataset(ds: Dataset, path, with_truth=False):
    cols = list(DATASET_COLUMNS)
    if with_truth:
        cols.append("true_soc")
        soc = ds.true_soc
    t = ds.time
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for k in range(len(ds)):
            row = [_fmt(t[k]), _fmt(ds.current[k]), _fmt(ds.voltage[k]), _fmt(ds.power[k]), LABELS[ds.labels[k]]]
            if with_truth:
                row.append(_fmt(soc[k]))
            w.writerow(row)


def ingest_dataset(path, format="csv", tolerance=0.01) -> Dataset:
    """Load a dataset CSV, checking sampling uniformity.

    Jitter within ``tolerance * dt`` is accepted and the channels are
    resampled onto the uniform grid with a warning.  Duplicated or
    decreasing timestamps and gaps are errors naming the offending rows
    (1-based, header is row 1).
    """
    if format != "csv":
        raise DataError(f"unsupported format {format!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if tuple(header[:5]) != DATASET_COLUMNS or header[5:] not in ([], ["true_soc"]):
            raise DataError(f"{path}: header {header} does not match {list(DATASET_COLUMNS)} [+ true_soc]")
        ncol = len(header)
        t, i, v, p, lab, soc = [], [], [], [], [], []
        for rowno, row in enumerate(reader, start=2):
            if len(row) != ncol:
                raise DataError(f"{path}: row {rowno} has {len(row)} fields, expected {ncol}")
            try:
                vals = [float(x) for x in row[:4]]
                if ncol == 6:
                    soc.append(float(row[5]))
            except ValueError as exc:
                raise DataError(f"{path}: row {rowno}: {exc}") from None
            if not all(math.isfinite(x) for x in vals):
                raise DataError(f"{path}: row {rowno} has non-finite values")
            if row[4] not in LABEL_CODE:
                raise DataError(f"{path}: row {rowno} has unknown label {row[4]!r}")
            t.append(vals[0])
            i.append(vals[1])
            v.append(vals[2])
            p.append(vals[3])
            lab.append(LABEL_CODE[row[4]])
    if len(t) < 2:
        raise DataError(f"{path}: need at least two samples")
    t = np.array(t)
    diffs = np.diff(t)
    bad = np.flatnonzero(diffs <= 0)
    if bad.size:
        r = int(bad[0]) + 3
        kind = "duplicated timestamp" if diffs[bad[0]] == 0 else "non-monotone time"
        raise DataError(f"{path}: {kind} at row {r}")
    dt = float(np.median(diffs))
    dev = np.abs(diffs - dt)
    bad = np.flatnonzero(dev > tolerance * dt)
    if bad.size:
        rows = ", ".join(str(int(b) + 3) for b in bad[:10])
        raise DataError(f"{path}: sampling gap or jitter beyond {tolerance:.0%} of dt at rows {rows}")
    chans = [np.array(i), np.array(v), np.array(p)]
    if ncol == 6:
        chans.append(np.array(soc))
    labels = np.array(lab, dtype=np.int8)
    k = np.arange(len(t))
    for cand in (t[1] - t[0], dt, (t[-1] - t[0]) / (len(t) - 1)):
        if np.array_equal(t[0] + k * cand, t):
            dt = float(cand)
            break
    else:
        # the end-to-end span averages out jitter; the median of the differences does not
        dt = float((t[-1] - t[0]) / (len(t) - 1))
        grid = t[0] + k * dt
        if np.max(np.abs(grid - t)) > 1e-9 * dt:
            log.warning("%s: timestamps jitter by up to %.3g%% of dt; resampling to a uniform grid",
                        path, 100 * dev.max() / dt)
            chans = [np.interp(grid, t, c) for c in chans]
            labels = labels[np.clip(np.searchsorted(t, grid, side="right") - 1, 0, len(t) - 1)]
    ds = Dataset(dt, chans[0], chans[1], chans[2], labels, t0=float(t[0]))
    if ncol == 6:
        n = len(ds)
        ds.truth = Truth(chans[3], np.full(n, np.nan), np.full(n, np.nan), np.full((n + 1, 4), np.nan))
    return ds


def write_table(table: ParameterTable, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for s, row in zip(table.soc_breakpoints, table.values):
            w.writerow([_fmt(s)] + [_fmt(x) for x in row])


def read_table(path) -> ParameterTable:
    rows = _read_numeric(path, TABLE_COLUMNS)
    vals = rows[:, 1:]
    mode = "none" if np.all(vals[:, 5:] == 0.0) else "esc"
    return ParameterTable(rows[:, 0], vals, mode)


def write_ocv(ocv: OCVData, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OCV_COLUMNS)
        for row in zip(ocv.soc_breakpoints, ocv.v_charge, ocv.v_discharge):
            w.writerow([_fmt(x) for x in row])


def read_ocv(path) -> OCVData:
    rows = _read_numeric(path, OCV_COLUMNS)
    return OCVData(rows[:, 0], rows[:, 1], rows[:, 2])


def _read_numeric(path, columns):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if tuple(header) != columns:
            raise DataError(f"{path}: expected header {list(columns)}, got {header}")
        out = []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append([float(x) for x in row])
            except ValueError as exc:
                raise DataError(f"{path}: row {rowno}: {exc}") from None
            if len(row) != len(columns):
                raise DataError(f"{path}: row {rowno} has {len(row)} fields")
    if not out:
        raise DataError(f"{path}: no data rows")
    return np.array(out)


def ensure_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
