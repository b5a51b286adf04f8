import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escsoc import model as M
from escsoc.model import CellConfig, CellState, OCVData, ParameterTable, ParamSet

from conftest import scalar_step, scalar_voc

P0 = ParamSet(0.02, 0.01, 0.015, 2.0, 50.0, 0.02, 100.0)


class TestInterpParams:
    def test_exact_breakpoint(self, table):
        assert M.interp_params(table, 0.4) == table.entries[1]

    def test_midpoint(self):
        t = ParameterTable([0.4, 0.6], [[0.02, 0.01, 0.01, 2, 50, 0, 0], [0.04, 0.01, 0.01, 2, 50, 0, 0]], "none")
        assert M.interp_params(t, 0.5).r0 == pytest.approx(0.03, abs=1e-15)

    def test_clamp(self, table):
        assert M.interp_params(table, 1.2) == table.entries[-1]
        assert M.interp_params(table, -0.3) == table.entries[0]

    @given(st.floats(-0.5, 1.5))
    def test_result_within_bounds(self, s):
        bp = [0.0, 0.5, 1.0]
        vals = [[0.0, 1.0, 0.5, 0.5, 500, 0.1, 3000], [1.0, 0.0, 0.2, 25, 50, 0.0, 0.0], [0.5, 0.5, 0.0, 3, 70, 0.02, 7]]
        M.interp_params(ParameterTable(bp, vals), s).validate()


class TestTableValidation:
    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            ParameterTable([0.5, 0.4], [P0, P0])

    def test_rejects_single_breakpoint(self):
        with pytest.raises(ValueError):
            ParameterTable([0.5], [P0])

    def test_rejects_out_of_bounds(self):
        with pytest.raises(ValueError):
            ParameterTable([0.1, 0.2], [P0, ParamSet(0.02, 0.01, 0.01, 0.3, 50.0)])

    def test_none_mode_requires_zero_hysteresis(self):
        with pytest.raises(ValueError):
            ParameterTable([0.1, 0.2], [P0, P0], "none")

    def test_ocv_identities(self, ocv):
        assert np.array_equal(ocv.v_mean, (ocv.v_charge + ocv.v_discharge) / 2)
        assert np.array_equal(ocv.m_table, (ocv.v_charge - ocv.v_discharge) / 2)

    def test_ocv_rejects_crossed_branches(self):
        with pytest.raises(ValueError):
            OCVData([0, 1], [3.5, 3.9], [3.6, 3.8])


class TestStepState:
    def test_coulomb_example(self):
        cfg = CellConfig(18000.0, dt=1.0)
        s = M.step_state(CellState(1.0), P0, 2.5, cfg)
        assert s.z == pytest.approx(0.9998611, abs=1e-7)

    def test_zero_input(self, cfg):
        s0 = CellState(0.5, 0.3, -0.2, 0.4)
        s = M.step_state(s0, P0, 0.0, cfg)
        assert s.z == 0.5 and s.h == 0.4
        assert s.i_r1 == pytest.approx(math.exp(-0.5) * 0.3, rel=1e-15)
        assert s.i_r2 == pytest.approx(math.exp(-1 / 50) * -0.2, rel=1e-15)

    def test_alpha_value(self):
        assert math.exp(-1.0 / 2.0) == pytest.approx(0.606531, abs=1e-6)

    @pytest.mark.parametrize("i,limit", [(5.0, -1.0), (-5.0, 1.0)])
    def test_sustained_current_drives_h_to_limit(self, i, limit):
        cfg = CellConfig(18000.0, dt=10.0)
        s = CellState(0.5, 0, 0, -limit)
        for _ in range(2000):
            s = M.step_state(s, P0, i, cfg)
        assert s.h == pytest.approx(limit, abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=50), st.floats(-1, 1), st.floats(0, 3000))
    def test_h_bounded(self, currents, h0, gamma):
        cfg = CellConfig(18000.0, dt=1.0)
        p = ParamSet(0.02, 0.01, 0.01, 2.0, 50.0, 0.02, gamma)
        s = CellState(0.5, 0.0, 0.0, h0)
        for i in currents:
            s = M.step_state(s, p, i, cfg)
            assert -1.0 <= s.h <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=200))
    def test_coulomb_consistency(self, currents):
        cfg = CellConfig(18000.0, dt=1.0)
        table = ParameterTable([0.0, 1.0], [P0, P0])
        ocv = OCVData.from_mean([0, 1], [3.0, 4.2])
        sim = M.simulate(table, ocv, cfg, currents, CellState(0.5))
        expected = 0.5 - cfg.dt / cfg.capacity_q * math.fsum(currents)
        assert sim.states[-1, 0] == pytest.approx(expected, abs=1e-12)

    def test_zero_current_fixed_point(self, table, ocv, cfg):
        x0 = CellState(0.6, 0.5, 0.25, 0.3)
        sim = M.simulate(table, ocv, cfg, np.zeros(20), x0)
        assert np.all(sim.states[:, 0] == 0.6) and np.all(sim.states[:, 3] == 0.3)
        p = M.interp_params(table, 0.6)
        ratio = sim.states[1:, 1] / sim.states[:-1, 1]
        assert np.allclose(ratio, math.exp(-cfg.dt / p.tau1), rtol=1e-12)


class TestOutputVoltage:
    def test_relaxed_rest(self, ocv):
        assert M.output_voltage(CellState(0.37), P0, ocv, 0.0) == ocv.voc(0.37)

    def test_instant_step(self, ocv):
        v0 = M.output_voltage(CellState(0.5), P0, ocv, 0.0)
        v1 = M.output_voltage(CellState(0.5), P0, ocv, 1.0)
        assert v0 - v1 == pytest.approx(P0.r0, abs=1e-15)

    def test_hysteresis_term(self, ocv):
        p = ParamSet(0.02, 0.01, 0.01, 2.0, 50.0, 0.02, 100.0)
        v = M.output_voltage(CellState(0.5, 0, 0, 1.0), p, ocv, 0.0)
        assert v == pytest.approx(ocv.voc(0.5) + 0.02, abs=1e-15)

    def test_ecm_degeneracy(self, ocv, cfg):
        table = ParameterTable([0.0, 1.0], [ParamSet(0.02, 0.01, 0.01, 2.0, 50.0)] * 2, "none")
        cur = np.sin(np.arange(500) / 7.0) * 3
        sim = M.simulate(table, ocv, cfg, cur, CellState(0.8, 0, 0, 0.4))
        assert np.all(sim.states[:, 3] == 0.4)
        z, i1, i2 = 0.8, 0.0, 0.0
        for k, i in enumerate(cur):
            v = scalar_voc(ocv.soc_breakpoints, ocv.v_mean, z) - 0.01 * i1 - 0.01 * i2 - 0.02 * i
            assert sim.voltage[k] == pytest.approx(v, abs=1e-12)
            z, i1, i2, _ = scalar_step(z, i1, i2, 0.0, i, 2.0, 50.0, 0.0, cfg.dt, cfg.capacity_q)


class TestSolveCurrentForPower:
    def test_zero_power(self, ocv):
        assert M.solve_current_for_power(CellState(0.5), P0, ocv, 0.0) == 0.0

    def test_quadratic_example(self):
        ocv = OCVData.from_mean([0, 1], [3.7, 3.7])
        p = ParamSet(0.02, 0.01, 0.01, 2.0, 50.0)
        i = M.solve_current_for_power(CellState(0.5), p, ocv, 7.4)
        assert i == pytest.approx((3.7 - math.sqrt(13.69 - 0.592)) / 0.04, rel=1e-12)
        assert i == pytest.approx(2.02210, abs=1e-5)
        assert abs((3.7 - 0.02 * i) * i - 7.4) <= 1e-9

    def test_small_r0_limit(self):
        ocv = OCVData.from_mean([0, 1], [3.7, 3.7])
        p = ParamSet(1e-12, 0.01, 0.01, 2.0, 50.0)
        assert M.solve_current_for_power(CellState(0.5), p, ocv, 10.0) == pytest.approx(10 / 3.7, rel=1e-9)

    def test_infeasible(self):
        ocv = OCVData.from_mean([0, 1], [3.7, 3.7])
        p = ParamSet(0.5, 0.01, 0.01, 2.0, 50.0)
        with pytest.raises(M.PowerInfeasibleError) as exc:
            M.solve_current_for_power(CellState(0.5), p, ocv, 10.0)
        assert exc.value.max_power == pytest.approx(3.7 ** 2 / 2.0)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(0.001, 0.5), st.floats(3.0, 4.2), st.floats(-1, 1))
    def test_consistency(self, r0, e, frac):
        ocv = OCVData.from_mean([0, 1], [e, e])
        p = ParamSet(r0, 0.0, 0.0, 2.0, 50.0)
        power = frac * e * e / (4 * r0)
        i = M.solve_current_for_power(CellState(0.5), p, ocv, power)
        assert abs((e - r0 * i) * i - power) <= 1e-9 * max(1.0, abs(power))


class TestJacobians:
    def test_state_jacobian_zero_current(self, cfg):
        A = M.state_jacobian(CellState(0.5), P0, cfg, 0.0)
        assert np.array_equal(A, np.diag([1.0, math.exp(-0.5), math.exp(-1 / 50), 1.0]))

    def test_state_jacobian_values(self, cfg):
        A = M.state_jacobian(CellState(0.5), P0, cfg, 50.0)
        assert A[1, 1] == pytest.approx(0.60653, abs=1e-5)
        assert A[2, 2] == pytest.approx(0.98020, abs=1e-5)

    def test_output_jacobian_flat_and_no_hysteresis(self):
        ocv = OCVData.from_mean([0, 0.5, 1], [3.6, 3.6, 4.0])
        p = ParamSet(0.02, 0.01, 0.015, 2.0, 50.0)
        C = M.output_jacobian(CellState(0.25), p, ocv)
        assert C[0, 0] == 0.0 and C[0, 3] == 0.0
        assert C[0, 1] == -0.01 and C[0, 2] == -0.015

    def test_output_jacobian_tie_break(self):
        ocv = OCVData.from_mean([0, 0.5, 1], [3.5, 3.6, 4.0])
        assert M.output_jacobian(CellState(0.5), P0, ocv)[0, 0] == pytest.approx(0.8)
