import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escsoc import protocols as P
from escsoc.data import LABEL_CODE, DataError
from escsoc.model import CellConfig

CELL = CellConfig(18000.0, dt=1.0)


def _pulse_integrals(prof, label):
    return [prof.values[s:e].sum() * prof.dt for name, s, e in prof.segments() if name == label]


class TestGitt:
    def test_pulse_charge_amount(self):
        prof = P.gen_gitt(P.GittConfig(), CELL)
        pulses = _pulse_integrals(prof, "pulse_discharge")
        assert len(pulses) == 20
        assert np.allclose(pulses, 900.0, rtol=0, atol=1e-9)
        assert pulses[0] / CELL.capacity_q == pytest.approx(0.05)
        assert set(prof.values[prof.labels == LABEL_CODE["pulse_discharge"]]) == {2.5}

    def test_single_pulse(self):
        cfg = P.GittConfig(pulse_c_rate=1.0, pulse_minutes=60.0, soc_step=1.0)
        prof = P.gen_gitt(cfg, CELL)
        assert [name for name, _, _ in prof.segments()] == ["pulse_discharge", "rest"]

    def test_inconsistent_step_rejected(self):
        with pytest.raises(ValueError, match="0.1"):
            P.gen_gitt(P.GittConfig(pulse_minutes=12.0), CELL)

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            P.gen_gitt(P.GittConfig(rest_hours=0.0), CELL)

    def test_reset_preamble(self):
        prof = P.gen_gitt(P.GittConfig(reset=P.ResetConfig()), CELL)
        names = [name for name, _, _ in prof.segments()]
        assert names[:3] == ["pulse_charge", "cv_hold", "rest"]
        assert prof.values[prof.labels == LABEL_CODE["cv_hold"]][0] == CELL.v_max


class TestGittOcv:
    def test_ladders(self):
        prof = P.gen_gitt_ocv(P.GittOcvConfig(), CELL)
        dis = _pulse_integrals(prof, "pulse_discharge")
        chg = _pulse_integrals(prof, "pulse_charge")
        assert len(dis) == 50 and len(chg) == 50
        assert np.allclose(dis, 360.0, atol=1e-9)
        assert dis[0] / CELL.capacity_q == pytest.approx(0.02)
        assert np.allclose(chg, -np.array(dis), atol=1e-9)

    def test_discharge_ladder_first(self):
        segs = [n for n, _, _ in P.gen_gitt_ocv(P.GittOcvConfig(), CELL).segments() if n != "rest"]
        assert segs == ["pulse_discharge"] * 50 + ["pulse_charge"] * 50


class TestChargePulse:
    def test_block_change(self):
        assert P.charge_pulse_block_change(P.ChargePulseConfig()) == pytest.approx(-0.05)

    def test_structure(self):
        prof = P.gen_gitt_charge_pulse(P.ChargePulseConfig(), CELL)
        assert prof.count("pulse_discharge") == 20 and prof.count("pulse_charge") == 20
        assert np.all(prof.values[prof.labels == LABEL_CODE["pulse_charge"]] < 0)
        net = prof.values.sum() * prof.dt / CELL.capacity_q
        assert net == pytest.approx(1.0)

    def test_charge_not_shorter_rejected(self):
        with pytest.raises(ValueError):
            P.gen_gitt_charge_pulse(P.ChargePulseConfig(charge_minutes=12.0), CELL)


class TestDriveCycle:
    def test_rest_zero_and_duration(self):
        trace = P.pseudo_drive_trace(3600.0, 1.0, seed=3)
        prof = P.gen_drive_cycle(trace, P.DriveConfig(), CELL)
        assert prof.mode == P.POWER
        assert np.all(prof.values[prof.labels == LABEL_CODE["rest"]] == 0.0)
        drive = prof.labels == LABEL_CODE["drive"]
        assert drive.sum() * prof.dt == 10 * 3600
        assert prof.duration == 19 * 3600
        with_trailing = P.gen_drive_cycle(trace, P.DriveConfig(trailing_rest=True), CELL)
        assert with_trailing.duration == 20 * 3600

    def test_scale_factor(self):
        trace = P.pseudo_drive_trace(3600.0, 1.0, seed=4)
        prof = P.gen_drive_cycle(trace, P.DriveConfig(blocks=1), CELL)
        scale = 0.10 * CELL.capacity_q * 3.6 / (trace.sum() * 1.0)
        assert np.allclose(prof.values[:3600], trace * scale, rtol=1e-14)
        assert prof.values[:3600].sum() == pytest.approx(0.1 * 18000 * 3.6, rel=1e-12)

    def test_nonfinite_rejected(self):
        trace = np.ones(3600)
        trace[17] = np.nan
        with pytest.raises(DataError, match="17"):
            P.gen_drive_cycle(trace, P.DriveConfig(), CELL)

    def test_short_trace_rejected(self):
        with pytest.raises(ValueError):
            P.gen_drive_cycle(np.ones(100), P.DriveConfig(), CELL)

    def test_pseudo_trace_deterministic(self):
        a = P.pseudo_drive_trace(600.0, 1.0, seed=9)
        assert np.array_equal(a, P.pseudo_drive_trace(600.0, 1.0, seed=9))
        assert a.mean() == pytest.approx(6.0)


class TestProfileCsv:
    @pytest.mark.parametrize("gen", ["gitt", "ocv", "pulse", "drive"])
    def test_round_trip(self, tmp_path, gen):
        cell = CellConfig(18000.0, dt=0.7)
        prof = {
            "gitt": lambda: P.gen_gitt(P.GittConfig(), cell),
            "ocv": lambda: P.gen_gitt_ocv(P.GittOcvConfig(), cell),
            "pulse": lambda: P.gen_gitt_charge_pulse(P.ChargePulseConfig(blocks=2), cell),
            "drive": lambda: P.gen_drive_cycle(P.pseudo_drive_trace(3600, 0.7, seed=1), P.DriveConfig(blocks=2), cell),
        }[gen]()
        path = tmp_path / "p.csv"
        P.write_profile(prof, path)
        back = P.read_profile(path)
        assert back.dt == prof.dt and back.mode == prof.mode
        assert np.array_equal(back.values, prof.values) and np.array_equal(back.labels, prof.labels)

    def test_write_to_stream(self):
        buf = io.StringIO()
        P.write_profile(P.gen_gitt(P.GittConfig(soc_step=1.0, pulse_minutes=120), CELL), buf)
        assert buf.getvalue().splitlines()[0] == "time_s,mode,value,label"

    def test_bad_header(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("t,mode,value,label\n0,current,1,rest\n")
        with pytest.raises(DataError):
            P.read_profile(path)

    def test_mixed_modes(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("time_s,mode,value,label\n0.0,current,1,rest\n1.0,power,1,rest\n")
        with pytest.raises(DataError):
            P.read_profile(path)


class TestProfileInvariants:
    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([0.1, 0.25, 0.5, 1.0, 2.0]), st.sampled_from([0.02, 0.05, 0.1, 0.25]))
    def test_pulse_integrals_match_step(self, dt, step):
        cell = CellConfig(18000.0, dt=dt)
        cfg = P.GittConfig(pulse_c_rate=1.0, pulse_minutes=60 * step, rest_hours=0.1, soc_step=step)
        prof = P.gen_gitt(cfg, cell)
        for a in _pulse_integrals(prof, "pulse_discharge"):
            assert abs(a - step * cell.capacity_q) <= cell.one_c * dt + 1e-9
        rest = prof.labels == LABEL_CODE["rest"]
        assert np.all((prof.values == 0) == rest)
