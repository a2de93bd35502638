import dataclasses
import math

import pytest
from hypothesis import given, strategies as st

from minisa.arch import buffer_geometry, clog2, eval_config, small_config
from minisa.mapper import evaluate, search
from minisa.microbaseline import (
    CALIBRATION_FILE, STALL_TABLE, CalibrationError, MicroCostParams, calibrate, calibration_error,
    compare, load_calibration, micro_bits_per_cycle, micro_schedule, micro_trace_cost,
    params_from_text, params_to_text, stall_fractions, with_replay,
)
from minisa.timing import COMPUTE, SimReport, schedule
from minisa.workloads import Workload

DEFAULTS = MicroCostParams()


def bits_oracle(ah: int, aw: int, d_out: int, d_str: int, sf: int, sw: int, pe: int) -> int:
    stages = sf * int(math.log2(aw))
    return stages * (aw // 2) * sw + aw * clog2(d_out) + clog2(d_str) + ah * aw * pe


class TestBitsPerCycle:
    def test_worked_example(self) -> None:
        # 4 stages * 2 switches * 2 bits + 4 banks * 6 + 6 + 16 PEs * 2
        cfg = small_config(4, 4, depth=64)
        assert buffer_geometry(cfg).d_out == 64
        assert micro_bits_per_cycle(cfg, DEFAULTS) == 78

    def test_minimal_positive(self) -> None:
        assert micro_bits_per_cycle(small_config(1, 2, depth=2), DEFAULTS) > 0

    def test_superlinear_in_aw(self) -> None:
        # hold buffer depth fixed so only the array width changes
        a = micro_bits_per_cycle(small_config(4, 16), DEFAULTS)
        b = micro_bits_per_cycle(small_config(4, 32), DEFAULTS)
        assert b > 2 * a

    @given(st.sampled_from([(4, 4), (4, 16), (8, 32), (16, 256)]),
           st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
    def test_formula(self, shape, sf: int, sw: int, pe: int) -> None:
        cfg = eval_config(*shape)
        g = buffer_geometry(cfg)
        expect = bits_oracle(cfg.ah, cfg.aw, g.d_out, g.d_str, sf, sw, pe)
        assert micro_bits_per_cycle(cfg, MicroCostParams(sf, sw, pe)) == expect


class TestParams:
    def test_defaults(self) -> None:
        assert (DEFAULTS.stage_factor, DEFAULTS.switch_bits, DEFAULTS.pe_ctrl_bits) == (2, 2, 2)
        assert DEFAULTS.birrd_stages(16) == 8

    @pytest.mark.parametrize("kw", [{"switch_bits": 0}, {"replay_ratio": 0.0}, {"replay_ratio": 1.5}])
    def test_rejects_non_positive(self, kw) -> None:
        with pytest.raises(CalibrationError):
            MicroCostParams(**kw)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.booleans(),
           st.integers(1, 256))
    def test_text_round_trip(self, sf, sw, pe, replay, ratio) -> None:
        p = MicroCostParams(sf, sw, pe, replay, ratio / 256)
        assert params_from_text(params_to_text(p)) == p

    def test_unknown_key(self) -> None:
        with pytest.raises(CalibrationError):
            params_from_text("stage_factor = 1\nbogus = 3\n")

    def test_committed_file_loads(self) -> None:
        p = load_calibration()
        assert p == load_calibration(CALIBRATION_FILE)
        assert p.replay and 0 < p.replay_ratio < 1

    def test_with_replay(self) -> None:
        p = with_replay(load_calibration(), False)
        assert not p.replay and p.fetched_fraction == 1.0


class TestTraceCost:
    def test_replay_off_arithmetic(self) -> None:
        cfg = small_config(4, 4, depth=64)
        rep = SimReport(ah=4, aw=4)
        rep.busy[COMPUTE] = 20
        assert micro_trace_cost(rep, cfg, with_replay(DEFAULTS, False)) == 195

    def test_zero_cycles(self) -> None:
        assert micro_trace_cost(SimReport(), small_config(4, 4), DEFAULTS) == 0

    def test_replay_reduces(self) -> None:
        cfg = small_config(4, 4)
        rep = SimReport(ah=4, aw=4)
        rep.busy[COMPUTE] = 1000
        on = MicroCostParams(replay=True, replay_ratio=0.25)
        assert micro_trace_cost(rep, cfg, on) * 4 == pytest.approx(micro_trace_cost(rep, cfg, with_replay(on, False)), abs=4)


def _pair(shape=(8, 24, 16), cfg=None, params=None):
    cfg = cfg or small_config(4, 4)
    sol = search(Workload("t", "t", *shape), cfg)
    params = params or load_calibration()
    return sol, schedule(sol.trace, cfg), micro_schedule(sol.trace, cfg, params), cfg


class TestCompare:
    def test_identical_reports(self) -> None:
        _, rep, _, cfg = _pair()
        row = compare(rep, rep, cfg, "same")
        assert row.reduction == 1 and row.speedup == 1
        assert row.minisa_itd == row.micro_itd

    def test_fields(self) -> None:
        _, rep, micro, cfg = _pair()
        row = compare(rep, micro, cfg, "w")
        assert (row.workload, row.ah, row.aw) == ("w", 4, 4)
        assert row.reduction == micro.instruction_bytes / rep.instruction_bytes
        assert row.micro_itd == micro.instruction_bytes / rep.data_bytes
        assert row.speedup == micro.total_cycles / rep.total_cycles

    @given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 20))
    def test_baseline_never_cheaper(self, m: int, k: int, n: int) -> None:
        _, rep, micro, _ = _pair((m, k, n), params=with_replay(DEFAULTS, False))
        assert micro.instruction_bytes >= rep.instruction_bytes
        assert micro.total_cycles >= rep.total_cycles

    def test_same_compute_schedule(self) -> None:
        _, rep, micro, _ = _pair()
        # every engine except instruction fetch does identical work
        assert micro.busy[1:] == rep.busy[1:] and micro.mac_count == rep.mac_count

    def test_stall_monotone_in_bits(self) -> None:
        sol, _, _, cfg = _pair((64, 16, 64), cfg=small_config(4, 16))
        fracs = [micro_schedule(sol.trace, cfg, MicroCostParams(1, 1, pe, True, 0.5)).stall_fraction
                 for pe in (1, 2, 3, 4)]
        bits = [micro_bits_per_cycle(cfg, MicroCostParams(1, 1, pe)) for pe in (1, 2, 3, 4)]
        assert bits == sorted(bits)
        assert fracs == sorted(fracs)

    def test_reduction_grows_with_stream_length(self) -> None:
        # same tile count, longer stream per tile: MINISA's layout setup amortizes
        cfg = small_config(4, 4)
        p = load_calibration()
        cand = search(Workload("t", "t", 16, 8, 8), cfg).candidate
        reds = []
        for m in (8, 16, 32):
            sol = evaluate(dataclasses.replace(cand, m_t=m), Workload("t", "t", m, 8, 8), cfg)
            reds.append(compare(sol.report, micro_schedule(sol.trace, cfg, p), cfg).reduction)
        assert reds == sorted(reds) and reds[0] < reds[-1]


class TestCalibration:
    def test_error_zero_on_target(self) -> None:
        assert calibration_error(dict(STALL_TABLE)) == 0

    def test_small_grid_keeps_zeros(self) -> None:
        wl = Workload("t", "t", 256, 8, 32)
        cfgs = {(4, 4): small_config(4, 4), (4, 16): small_config(4, 16)}
        traces = {k: (search(wl, c).trace, c) for k, c in cfgs.items()}
        target = {(4, 4): 0.0, (4, 16): 0.5}
        grid = {"stage_factor": (1, 2), "switch_bits": (1,), "pe_ctrl_bits": (1, 2)}
        p, err = calibrate(traces, grid, target)
        fr = stall_fractions(traces, p)
        assert fr[(4, 4)] == 0
        assert err == pytest.approx(calibration_error(fr, target))

    def test_impossible_zero(self) -> None:
        # one byte per cycle of fetch cannot keep up even at the smallest ratio
        c = dataclasses.replace(small_config(4, 64), bw_instr=1)
        traces = {(4, 64): (search(Workload("t", "t", 256, 8, 64), c).trace, c)}
        grid = {"stage_factor": (3,), "switch_bits": (4,), "pe_ctrl_bits": (4,)}
        with pytest.raises(CalibrationError):
            calibrate(traces, grid, {(4, 64): 0.0})
