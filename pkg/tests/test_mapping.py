import collections

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import enumerate_equation_one
from minisa.arch import buffer_geometry, small_config
from minisa.isa import Dataflow, LayoutSpec, MappingEM, MappingES, Operand
from minisa.mapper import evaluate
from minisa.mapping import (
    MissingMapping, PsumTarget, ReductionMismatch, StationaryAssignment, check_output_legality,
    check_stream_read_legality, format_schedule, psum_targets, stationary_assignment,
    streaming_schedule,
)
from minisa.program import Candidate
from minisa.workloads import Workload

CFG = small_config(4, 4)
GEOM = buffer_geometry(CFG)


class TestStationary:
    def test_replicate_across_columns(self) -> None:
        sa = stationary_assignment(MappingEM(0, 0, 4, 1, 1, 0), CFG)
        assert (sa.r == 0).all()
        assert (sa.c == np.arange(4)[:, None]).all()

    def test_reduction_groups(self) -> None:
        sa = stationary_assignment(MappingEM(0, 0, 2, 1, 1, 0), CFG)
        assert list(sa.r) == [0, 0, 1, 1]

    def test_single_row_constant(self) -> None:
        sa = stationary_assignment(MappingEM(1, 3, 1, 1, 0, 0), small_config(1, 4))
        assert (sa.c == 3).all()

    @given(st.integers(0, 5), st.integers(0, 5), st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4]),
           st.integers(0, 4), st.integers(0, 4), st.integers(0, 5), st.integers(1, 4), st.integers(1, 4))
    def test_matches_pe_enumeration(self, r0, c0, g_r, g_c, s_r, s_c, m0, s_m, T) -> None:
        em, es = MappingEM(r0, c0, g_r, g_c, s_r, s_c), MappingES(m0, s_m, T, 4, Dataflow.WOS)
        sa = stationary_assignment(em, CFG)
        ss = streaming_schedule(em, es, CFG)
        for p in enumerate_equation_one((r0, c0, g_r, g_c, s_r, s_c), (m0, s_m, T), 4, 4):
            assert sa.r[p["a_w"]] == p["r"] and sa.c[p["a_h"], p["a_w"]] == p["c"]
            assert ss.j[p["a_w"]] == p["j"] and ss.x[p["t"], p["a_w"]] == p["m"]


class TestStreaming:
    def test_case_study_table(self) -> None:
        ss = streaming_schedule(MappingEM(0, 0, 2, 1, 1, 0), MappingES(0, 3, 3, 4, Dataflow.WOS), CFG)
        assert format_schedule(ss) == (
            "t=0: IVN(0,0) IVN(1,0) IVN(0,1) IVN(1,1)\n"
            "t=1: IVN(3,0) IVN(4,0) IVN(3,1) IVN(4,1)\n"
            "t=2: IVN(6,0) IVN(7,0) IVN(6,1) IVN(7,1)\n"
        )

    def test_single_step(self) -> None:
        ss = streaming_schedule(MappingEM(0, 0, 4, 1, 1, 0), MappingES(5, 7, 1, 4, Dataflow.WOS), CFG)
        assert list(ss.x[0]) == [5, 6, 7, 8]

    def test_pure_multicast(self) -> None:
        ss = streaming_schedule(MappingEM(0, 0, 4, 4, 1, 0), MappingES(0, 1, 3, 4, Dataflow.WOS), CFG)
        assert (ss.x == ss.x[:, :1]).all()

    def test_missing_mapping(self) -> None:
        with pytest.raises(MissingMapping):
            streaming_schedule(None, MappingES(0, 1, 1, 4, Dataflow.WOS), CFG)


class TestReadLegality:
    # m_L1 -> j_L1 -> m_L0 with two m per level-0 group: one slot row holds m in {2i, 2i+1}, j in {0, 1}
    X = LayoutSpec(Operand.I, 4, 2, 2, 4, 4)

    def test_case_study_first_cycle(self) -> None:
        em, es = MappingEM(0, 0, 2, 1, 1, 0), MappingES(0, 3, 3, 4, Dataflow.WOS)
        assert check_stream_read_legality(streaming_schedule(em, es, CFG, np.arange(1)), self.X, GEOM)

    def test_split_rows_rejected(self) -> None:
        em, es = MappingEM(0, 0, 2, 1, 1, 0), MappingES(0, 3, 3, 4, Dataflow.WOS)
        v = check_stream_read_legality(streaming_schedule(em, es, CFG), self.X, GEOM)
        assert not v and v.reason == "bank-conflict" and v.where[0] == 1

    def test_multicast_accepts(self) -> None:
        em, es = MappingEM(0, 0, 4, 4, 1, 0), MappingES(0, 1, 8, 4, Dataflow.WOS)
        assert check_stream_read_legality(streaming_schedule(em, es, CFG), self.X, GEOM)


def _targets(m, n) -> PsumTarget:
    m, n = np.array(m)[None, None, :], np.array(n)[None, None, :]
    return PsumTarget(m, n, np.ones(m.shape, dtype=bool))


class TestOutputLegality:
    O = LayoutSpec(Operand.O, 4, 1, 4, 1, 0)  # p_L1 -> p_L0 -> q_L1: p = column

    def test_full_reduction_single_write(self) -> None:
        assert check_output_legality(_targets([1, 1, 1, 1], [0, 0, 0, 0]), self.O, GEOM)

    def test_distinct_banks(self) -> None:
        assert check_output_legality(_targets([0, 1, 2, 3], [0, 1, 2, 3]), self.O, GEOM)

    def test_same_bank_conflict(self) -> None:
        v = check_output_legality(_targets([0, 0, 1, 2], [0, 1, 0, 0]), self.O, GEOM)
        assert not v and v.reason == "port-conflict"


class TestPsumTargets:
    def test_reduction_mismatch(self) -> None:
        sa = StationaryAssignment(np.array([0, 0, 1, 1]), np.zeros((4, 4), dtype=int))
        ss = streaming_schedule(MappingEM(0, 0, 4, 1, 1, 0), MappingES(0, 1, 1, 4, Dataflow.WOS), CFG)
        with pytest.raises(ReductionMismatch):
            psum_targets(sa, ss, Dataflow.WOS, 4)

    def test_single_pe(self) -> None:
        cfg = small_config(1, 2)
        em, es = MappingEM(0, 3, 2, 2, 0, 0), MappingES(5, 1, 1, 1, Dataflow.WOS)
        t = psum_targets(stationary_assignment(em, cfg), streaming_schedule(em, es, cfg), es.df, 1)
        assert {(int(a), int(b)) for a, b in zip(t.m.ravel(), t.n.ravel())} == {(5, 3)}

    def test_io_s_swaps_roles(self) -> None:
        em, es = MappingEM(0, 0, 4, 1, 1, 0), MappingES(2, 1, 1, 4, Dataflow.IOS)
        sa, ss = stationary_assignment(em, CFG), streaming_schedule(em, es, CFG)
        w = psum_targets(sa, ss, Dataflow.WOS, 4)
        i = psum_targets(sa, ss, Dataflow.IOS, 4)
        assert (w.m == i.n).all() and (w.n == i.m).all()

    @pytest.mark.parametrize("cand,wl", [
        (Candidate(Dataflow.WOS, 8, 8, 8, 1, 1), Workload("t", "a", 8, 8, 8)),
        (Candidate(Dataflow.WOS, 8, 8, 8, 2, 2), Workload("t", "b", 8, 8, 8)),
        (Candidate(Dataflow.IOS, 8, 8, 6, 2, 1, "strided"), Workload("t", "c", 6, 8, 8)),
        (Candidate(Dataflow.WOS, 7, 6, 5, 1, 4), Workload("t", "d", 7, 6, 5)),
    ])
    def test_each_output_reduced_once_per_vn_row(self, cand: Candidate, wl: Workload) -> None:
        sol = evaluate(cand, wl, CFG)
        assert hasattr(sol, "latency")
        counts: collections.Counter = collections.Counter()
        for em, es in sol.invocations:
            sa, ss = stationary_assignment(em, CFG), streaming_schedule(em, es, CFG)
            t = psum_targets(sa, ss, es.df, es.vn_size, sol.layouts.s, sol.layouts.x)
            for m, n, live in zip(t.m.ravel(), t.n.ravel(), t.live.ravel()):
                # targets past the tensor edge are zero padding
                if live and m < wl.m and n < wl.n:
                    counts[(int(m), int(n))] += 1
        kv = -(-wl.k // sol.geometry.vn)
        assert set(counts) == {(m, n) for m in range(wl.m) for n in range(wl.n)}
        assert set(counts.values()) == {kv}
