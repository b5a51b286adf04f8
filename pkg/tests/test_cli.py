import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from escsoc import bench, cli
from escsoc import protocols as P
from escsoc.config import MODELS, SCHEME_NAMES, load_config
from escsoc.data import ingest_dataset


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.yaml"
    path.write_text(yaml.safe_dump({"seed": 3, "n_cells": 3, "cell": {"dt": 10.0}}))
    return path


@pytest.fixture(scope="module")
def bench_dir(small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    assert cli.socbench(["--config", str(small_config), "--out", str(out), "--traces"]) == 0
    return out


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("seed: 1\nbogus: 2\n")
        assert cli.socbench(["--config", str(bad), "--print-effective-config"]) == cli.EXIT_CONFIG

    def test_missing_seed(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("n_cells: 2\n")
        assert cli.socbench(["--config", str(bad), "--print-effective-config"]) == cli.EXIT_CONFIG

    def test_socgen_unknown_key(self, tmp_path):
        bad = tmp_path / "g.yaml"
        bad.write_text("bogus: 1\n")
        assert cli.socgen(["gitt", "--config", str(bad), "--out", str(tmp_path / "p.csv")]) == cli.EXIT_CONFIG

    def test_data_error(self, tmp_path):
        prof = tmp_path / "p.csv"
        prof.write_text("nonsense\n")
        assert cli.socsynth(["--profile", str(prof), "--out", str(tmp_path / "d.csv"), "--seed", "1"]) == cli.EXIT_DATA

    def test_missing_file_is_data_error(self, tmp_path):
        assert cli.socsynth(["--profile", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "d.csv"),
                             "--seed", "1"]) == cli.EXIT_DATA

    def test_unknown_plot_kind(self, tmp_path):
        assert cli.socplot(["--kind", "pie", "--input", "x", "--out", str(tmp_path / "o.csv")]) == cli.EXIT_CONFIG

    def test_module_dispatch(self):
        r = subprocess.run([sys.executable, "-m", "escsoc", "frobnicate"], capture_output=True, text=True)
        assert r.returncode == cli.EXIT_CONFIG and "usage" in r.stderr


class TestEffectiveConfig:
    def test_print_and_env(self, small_config, capsys, monkeypatch, tmp_path):
        monkeypatch.setenv("ESCSOC_OUTPUT_DIR", str(tmp_path / "env_out"))
        monkeypatch.setenv("ESCSOC_THREADS", "3")
        assert cli.socbench(["--config", str(small_config), "--print-effective-config"]) == 0
        eff = yaml.safe_load(capsys.readouterr().out)
        assert eff["output_dir"] == str(tmp_path / "env_out")
        assert eff["workers"] == 3 and eff["seed"] == 3 and eff["cell"]["dt"] == 10.0

    def test_flag_beats_env(self, small_config, capsys, monkeypatch, tmp_path):
        monkeypatch.setenv("ESCSOC_OUTPUT_DIR", str(tmp_path / "env_out"))
        assert cli.socbench(["--config", str(small_config), "--out", "flag_out", "--seed", "9",
                             "--print-effective-config"]) == 0
        eff = yaml.safe_load(capsys.readouterr().out)
        assert eff["output_dir"] == "flag_out" and eff["seed"] == 9

    def test_bad_thread_count(self, small_config):
        with pytest.raises(Exception, match="ESCSOC_THREADS"):
            load_config(small_config, env={"ESCSOC_THREADS": "many"})

    def test_hash_ignores_output_location(self, small_config):
        a = load_config(small_config, {"output_dir": "a"}, env={})
        b = load_config(small_config, {"output_dir": "b", "workers": 4}, env={})
        assert a.content_hash() == b.content_hash()
        assert a.content_hash() != load_config(small_config, {"seed": 4}, env={}).content_hash()


class TestSocgen:
    def test_stdout(self, capsys):
        assert cli.socgen(["gitt", "--dt", "10"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "time_s,mode,value,label"
        assert len(lines) - 1 == len(P.gen_gitt(P.GittConfig(), cli.CellConfig(dt=10.0)))

    def test_config_overrides_flags(self, tmp_path):
        cfg = tmp_path / "g.yaml"
        cfg.write_text(yaml.safe_dump({"cell": {"dt": 5.0}, "protocol": {"blocks": 2}, "trace_seed": 4}))
        out = tmp_path / "p.csv"
        assert cli.socgen(["drive", "--config", str(cfg), "--blocks", "7", "--out", str(out)]) == 0
        prof = P.read_profile(out)
        assert prof.dt == 5.0 and prof.mode == P.POWER
        assert prof.count("drive") == 2


class TestChain:
    def test_files_only_pipeline(self, tmp_path, bench_dir):
        f = lambda name: str(tmp_path / name)
        for proto in ("gitt-ocv", "gitt"):
            assert cli.socgen([proto, "--dt", "10", "--out", f(f"{proto}.csv")]) == 0
            assert cli.socsynth(["--profile", f(f"{proto}.csv"), "--out", f(f"{proto}_ds.csv"), "--seed", "1"]) == 0
        assert cli.socfit(["ocv", "--data", f("gitt-ocv_ds.csv"), "--out", f("ocv.csv")]) == 0
        assert cli.socfit(["ols", "--gitt", f("gitt_ds.csv"), "--ocv", f("ocv.csv"), "--hysteresis",
                           "--out", f("table.csv"), "--report", f("fit.json")]) == 0
        assert json.loads((tmp_path / "fit.json").read_text())["global_rmse"] < 0.02
        assert cli.socgen(["drive", "--dt", "10", "--blocks", "2", "--lead-rest-minutes", "10",
                           "--out", f("drive.csv")]) == 0
        assert cli.socsynth(["--profile", f("drive.csv"), "--out", f("drive_ds.csv"), "--seed", "2",
                             "--v-noise", "0.001", "--i-bias", "0.01", "--with-truth"]) == 0
        noise = bench_dir / "cell0" / "noise_ECMh.json"
        for scheme in ("coulomb", "adaptive-ekf"):
            args = ["--scheme", scheme, "--model", f("table.csv"), "--ocv", f("ocv.csv"), "--data", f("drive_ds.csv"),
                    "--out", f(f"{scheme}.json"), "--steps", f(f"{scheme}.csv")]
            if scheme != "coulomb":
                args += ["--noise", str(noise)]
            assert cli.socest(args) == 0
            rep = json.loads((tmp_path / f"{scheme}.json").read_text())
            assert rep["rms_error"] < 0.05
        n = len(ingest_dataset(f("drive_ds.csv")))
        assert len(_rows(f("adaptive-ekf.csv"))) == n + 1
        assert cli.socplot(["--kind", "abs_error", "--input", f("adaptive-ekf.csv"), "--out", f("err.csv")]) == 0
        rows = _rows(f("err.csv"))
        assert rows[0] == ["series", "x", "y"] and len(rows) == n + 1
        assert cli.socplot(["--kind", "soc_trace", "--input", f("coulomb.csv"), "--out", f("trace.csv")]) == 0
        assert len(_rows(f("trace.csv"))) == 2 * n + 1

    def test_ekf_scheme_needs_noise(self, tmp_path, bench_dir):
        d = bench_dir / "cell0"
        code = cli.socest(["--scheme", "const-ekf", "--model", str(d / "table_ECM.csv"), "--ocv", str(d / "ocv.csv"),
                           "--data", "unused.csv", "--out", str(tmp_path / "o.json")])
        assert code in (cli.EXIT_CONFIG, cli.EXIT_DATA)


class TestBench:
    def test_report_entries(self, bench_dir):
        rep = bench.BenchmarkReport.load(bench_dir / "report.json")
        assert len(rep.entries()) == len(MODELS) * len(SCHEME_NAMES) * 3
        for m, (mean, lo, hi) in rep.voltage_summary().items():
            assert lo <= mean <= hi
        for k, (mean, lo, hi) in rep.soc_summary().items():
            assert lo <= mean <= hi
        assert rep.reference_context

    def test_artefacts(self, bench_dir):
        assert (bench_dir / "effective_config.yaml").is_file()
        for c in ("cell0", "cell1", "cell2"):
            for m in MODELS:
                assert (bench_dir / c / f"table_{m}.csv").is_file()
        rows = _rows(bench_dir / "rmse_bars_soc.csv")
        assert rows[0] == ["series", "x", "y", "mean", "min", "max"]
        assert len(rows) - 1 == len(MODELS) * len(SCHEME_NAMES)
        assert len(_rows(bench_dir / "rmse_bars_voltage.csv")) - 1 == len(MODELS)

    def test_rerun_identical(self, small_config, bench_dir, tmp_path):
        assert cli.socbench(["--config", str(small_config), "--out", str(tmp_path)]) == 0
        digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
        assert digest(tmp_path / "report.json") == digest(bench_dir / "report.json")

    def test_voltage_trace_round_trip(self, bench_dir, tmp_path):
        src = bench_dir / "cell0" / "voltage_trace_ECM.csv"
        run = cli.read_voltage_trace(src)
        assert cli.socplot(["--kind", "voltage_trace", "--input", str(src), "--out", str(tmp_path / "v.csv")]) == 0
        assert len(_rows(tmp_path / "v.csv")) == 2 * len(run.v_model) + 1


class TestEmitPlotdata:
    def test_unknown_kind(self, tmp_path):
        with pytest.raises(bench.PlotDataError):
            bench.emit_plotdata(None, "pie", tmp_path / "x.csv")

    def test_empty_run(self, tmp_path):
        run = bench.VoltageRun("x", 1.0, np.array([]), np.array([]))
        with pytest.raises(bench.PlotDataError):
            bench.emit_plotdata(run, "voltage_trace", tmp_path / "x.csv")
        assert not (tmp_path / "x.csv").exists()

    def test_wrong_input_type(self, tmp_path):
        with pytest.raises(bench.PlotDataError):
            bench.emit_plotdata(object(), "rmse_bars", tmp_path / "x.csv")
