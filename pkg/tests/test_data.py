import logging

import numpy as np
import pytest

from escsoc import protocols as P
from escsoc import synth
from escsoc.data import DataError, Dataset, ingest_dataset, read_ocv, read_table, write_dataset, write_ocv, write_table
from escsoc.model import CellConfig


def _rows(path, rows):
    path.write_text("time_s,current_a,voltage_v,power_w,label\n" + "".join(r + "\n" for r in rows))
    return path


@pytest.fixture
def small_ds():
    cfg = CellConfig(18000.0, dt=1.0)
    spec = synth.TruthCellSpec.default(cfg=cfg)
    cell = synth.make_cells(spec, 1, 0)[0]
    prof = P.gen_gitt(P.GittConfig(rest_hours=0.05), cfg)
    return synth.synthesize(cell, prof.__class__(prof.dt, prof.mode, prof.values[:2000], prof.labels[:2000]),
                            synth.SensorModel(0.001, 0.001, 0.0), seed=5)


class TestDatasetCsv:
    def test_round_trip(self, tmp_path, small_ds):
        path = tmp_path / "d.csv"
        write_dataset(small_ds, path)
        back = ingest_dataset(path)
        assert back.dt == small_ds.dt and back.truth is None
        for name in ("current", "voltage", "power", "labels"):
            assert np.array_equal(getattr(back, name), getattr(small_ds, name))

    def test_round_trip_with_truth(self, tmp_path, small_ds):
        path = tmp_path / "d.csv"
        write_dataset(small_ds, path, with_truth=True)
        assert np.array_equal(ingest_dataset(path).true_soc, small_ds.true_soc)

    def test_truth_hidden_by_default(self, tmp_path, small_ds):
        path = tmp_path / "d.csv"
        write_dataset(small_ds, path)
        assert "true_soc" not in path.read_text().splitlines()[0]
        with pytest.raises(DataError):
            ingest_dataset(path).true_soc

    def test_duplicate_timestamp_names_row(self, tmp_path):
        path = _rows(tmp_path / "d.csv", ["0.0,0,3.7,0,rest", "1.0,0,3.7,0,rest", "1.0,0,3.7,0,rest",
                                          "2.0,0,3.7,0,rest"])
        with pytest.raises(DataError, match="duplicated timestamp at row 4"):
            ingest_dataset(path)

    def test_gap_names_row(self, tmp_path):
        path = _rows(tmp_path / "d.csv", [f"{t}.0,0,3.7,0,rest" for t in (0, 1, 2, 3, 5, 6, 7)])
        with pytest.raises(DataError, match="rows 6"):
            ingest_dataset(path)

    def test_jitter_accepted_with_warning(self, tmp_path, caplog):
        t = np.arange(50, dtype=float)
        t[1:-1] += 0.005 * np.where(np.arange(1, 49) % 2, 1, -1) / 2
        rows = [f"{float(x)!r},{k * 0.1!r},3.7,0,rest" for k, x in enumerate(t)]
        path = _rows(tmp_path / "d.csv", rows)
        with caplog.at_level(logging.WARNING):
            ds = ingest_dataset(path)
        assert "resampling" in caplog.text
        assert ds.dt == pytest.approx(1.0, abs=1e-12) and len(ds) == 50
        assert np.all(np.isfinite(ds.current))

    def test_malformed_row(self, tmp_path):
        path = _rows(tmp_path / "d.csv", ["0.0,0,3.7,0,rest", "1.0,abc,3.7,0,rest"])
        with pytest.raises(DataError, match="row 3"):
            ingest_dataset(path)

    def test_unknown_label(self, tmp_path):
        path = _rows(tmp_path / "d.csv", ["0.0,0,3.7,0,rest", "1.0,0,3.7,0,walk"])
        with pytest.raises(DataError, match="walk"):
            ingest_dataset(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(DataError):
            ingest_dataset(path)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            Dataset(1.0, np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3, dtype=np.int8))


class TestTableCsv:
    def test_table_round_trip(self, tmp_path, table):
        write_table(table, tmp_path / "t.csv")
        back = read_table(tmp_path / "t.csv")
        assert np.array_equal(back.values, table.values)
        assert np.array_equal(back.soc_breakpoints, table.soc_breakpoints)
        assert back.hysteresis_mode == "esc"

    def test_ocv_round_trip(self, tmp_path, ocv):
        write_ocv(ocv, tmp_path / "o.csv")
        back = read_ocv(tmp_path / "o.csv")
        assert np.array_equal(back.v_charge, ocv.v_charge) and np.array_equal(back.v_discharge, ocv.v_discharge)

    def test_bad_table_header(self, tmp_path):
        (tmp_path / "t.csv").write_text("soc,r0\n0,1\n")
        with pytest.raises(DataError):
            read_table(tmp_path / "t.csv")
