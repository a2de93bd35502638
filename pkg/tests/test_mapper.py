import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_mapper, full_grid
from minisa.arch import small_config
from minisa.isa import (
    Commit, Dataflow, ExecuteMapping, ExecuteStreaming, Load, MappingEM, Operand, SetIVNLayout,
    SetOVNLayout, SetWVNLayout, Write, count_kinds, decode, encode, flatten,
)
from minisa.mapper import (
    NoFeasibleCandidate, SearchStats, ShapeMismatch, boundary_layout, candidate_to_program,
    chain_eligible, chain_search, chain_trace, count_combined_groups, count_vn_groups, evaluate,
    feasible, knob_grid, lower_to_vns, search,
)
from minisa.program import (
    BLOCK, CONSECUTIVE, INTERLEAVED, STRIDED, Candidate, InfeasibleKnob, TraceOptions, repeat,
    resolve,
)
from minisa.simulator import run_functional
from minisa.timing import schedule, tile_cycles
from minisa.workloads import Workload

CFG = small_config(4, 4)
WL8 = Workload("t", "w8", 8, 8, 8)


class TestCounting:
    def test_lower_to_vns(self) -> None:
        assert lower_to_vns(WL8, 4).w == (2, 8)
        assert lower_to_vns(Workload("t", "t", 3, 4, 5), 4).i == (1, 3)
        assert lower_to_vns(Workload("t", "t", 3, 10, 5), 4).w == (3, 5)
        assert lower_to_vns(Workload("t", "t", 3, 10, 5), 4).o == (2, 3)

    def test_groups(self) -> None:
        assert [count_vn_groups(t, CFG) for t in [(8, 8, 8), (1, 4, 4), (4, 10, 3)]] == [32, 1, 12]
        assert [count_combined_groups(t, CFG) for t in [(8, 8, 8), (1, 4, 4), (4, 10, 3)]] == [4, 1, 3]


class TestProgram:
    def test_leftover_groups_raise_duplication(self) -> None:
        g = resolve(Candidate(Dataflow.WOS, 8, 24, 4), Workload("t", "t", 8, 24, 4), CFG)
        plan = g.plan(8, 24, 4, raise_dup=True)
        (em1, _), (em2, es2) = plan.pairs()
        assert em1.g_r == 1 and em2.g_r == 2 and em2.r0 == 4
        assert es2.s_m == 2 and es2.t == 4

    def test_full_multicast(self) -> None:
        g = resolve(Candidate(Dataflow.WOS, 8, 4, 1, 1, 4), Workload("t", "t", 8, 4, 1), CFG)
        pairs = g.plan(8, 4, 1).pairs()
        assert len(pairs) == 1 and pairs[0][0].g_r == 4

    def test_stride_knobs(self) -> None:
        wl = Workload("t", "t", 8, 8, 8)
        blk = resolve(Candidate(Dataflow.WOS, 8, 8, 8, 2, 1, BLOCK), wl, CFG)
        strd = resolve(Candidate(Dataflow.WOS, 8, 8, 8, 2, 1, STRIDED), wl, CFG)
        assert (blk.s_r, blk.s_c) == (1, 4) and (strd.s_r, strd.s_c) == (2, 1)
        em, es = blk.plan(8, 8, 8).pairs()[0]
        assert (em.g_r, em.g_c) == (2, 2) and es.s_m == 1

    def test_interleaved_stride_is_dup(self) -> None:
        g = resolve(Candidate(Dataflow.WOS, 8, 4, 4, 1, 4, BLOCK, INTERLEAVED), WL8, CFG)
        _, es = g.plan(8, 4, 4).pairs()[0]
        assert es.s_m == 4 and es.t == 2

    def test_knob_violations(self) -> None:
        with pytest.raises(InfeasibleKnob):
            resolve(Candidate(Dataflow.WOS, 8, 8, 8, 4, 2), WL8, CFG)
        with pytest.raises(InfeasibleKnob):
            resolve(Candidate(Dataflow.WOS, 8, 8, 8, 1, 2, BLOCK, CONSECUTIVE), WL8, CFG)

    def test_candidate_to_program_walkthrough(self) -> None:
        # both N tiles share one tile shape, hence one listed pair
        lay, pairs = candidate_to_program(Candidate(Dataflow.WOS, 8, 8, 4), WL8, CFG)
        assert lay is not None and len(pairs) == 1
        assert (pairs[0][0].g_r, pairs[0][1].s_m, pairs[0][1].t) == (2, 2, 4)

    def test_repeat_recovers_pattern(self) -> None:
        items = repeat(lambda i: [ExecuteMapping(MappingEM(0, 3 * i, 1, 1, 0, 0))], 5)
        assert [ins.em.c0 for ins in flatten(items)] == [0, 3, 6, 9, 12]

    def test_repeat_alternation(self) -> None:
        items = repeat(lambda i: [ExecuteMapping(MappingEM(0, 8 * (i % 2) + i, 1, 1, 0, 0))], 6)
        assert [ins.em.c0 for ins in flatten(items)] == [0, 9, 2, 11, 4, 13]

    def test_repeat_rejects_nonlinear(self) -> None:
        with pytest.raises(ValueError):
            repeat(lambda i: [ExecuteMapping(MappingEM(0, i * i, 1, 1, 0, 0))], 5)


class TestFeasible:
    def test_capacity_reject(self) -> None:
        v = feasible(Candidate(Dataflow.WOS, 512, 4, 1), Workload("t", "t", 512, 4, 1), CFG)
        assert not v and v.reason == "capacity"

    def test_walkthrough_accepts(self) -> None:
        assert feasible(Candidate(Dataflow.WOS, 8, 8, 4), WL8, CFG)


class TestSearch:
    def test_walkthrough_optimum(self) -> None:
        sol = search(WL8, CFG)
        assert sol.latency == 92
        assert (sol.candidate.dataflow, sol.candidate.m_t, sol.candidate.n_t) == (Dataflow.WOS, 8, 4)
        assert len(sol.invocations) == 1 and sol.geometry.nc == 2

    def test_degenerate_single_invocation(self) -> None:
        for aw in (2, 4, 8):
            cfg = small_config(4, aw)
            sol = search(Workload("t", "t", 4, 4, 4), cfg)
            assert sol.report.compute_tiles == 1
            em, es = sol.invocations[0]
            assert sol.report.busy[2] >= tile_cycles(em, es, cfg)

    def test_deterministic(self) -> None:
        wl = Workload("t", "t", 12, 10, 7)
        a, b = search(wl, CFG), search(wl, CFG)
        assert a.candidate == b.candidate and a.trace == b.trace

    def test_estimate_is_simulation(self) -> None:
        sol = search(Workload("t", "t", 12, 10, 7), CFG)
        assert schedule(sol.trace, CFG) == sol.report

    def test_pruning_keeps_optimum(self) -> None:
        for shape in [(5, 7, 3), (8, 8, 8), (12, 4, 9)]:
            wl = Workload("t", "t", *shape)
            st_on, st_off = SearchStats(), SearchStats()
            on = search(wl, CFG, stats=st_on)
            off = search(wl, CFG, pruning=False, stats=st_off)
            assert on.latency == off.latency == brute_force_mapper(wl, CFG).latency
            assert st_on.evaluated < st_off.evaluated

    def test_reduced_grid_subset(self) -> None:
        full = set(full_grid(WL8, CFG))
        assert set(knob_grid(WL8, CFG)) == full
        assert set(knob_grid(WL8, CFG, reduced=True)) < full

    def test_no_feasible(self) -> None:
        with pytest.raises(NoFeasibleCandidate):
            search(Workload("t", "t", 4, 4, 4), CFG, filter_fn=lambda c: False)

    @settings(max_examples=15)
    @given(st.integers(1, 24), st.integers(1, 24), st.integers(1, 24), st.integers(0, 2**31))
    def test_solutions_exact(self, m, k, n, seed) -> None:
        sol = search(Workload("t", "t", m, k, n), CFG)
        rng = np.random.default_rng(seed)
        I, W = rng.integers(-8, 8, (m, k)), rng.integers(-8, 8, (k, n))
        assert np.array_equal(run_functional(sol.trace, CFG, {0: I, 1: W})[2], I @ W)


class TestTraceShape:
    def test_walkthrough_instruction_multiset(self) -> None:
        sol = evaluate(Candidate(Dataflow.WOS, 8, 8, 8, 2, 1), WL8, CFG)
        kinds = count_kinds(sol.trace.items)
        assert kinds[SetIVNLayout] == kinds[SetWVNLayout] == kinds[SetOVNLayout] == 1
        assert kinds[Load] == 2 and kinds[Write] == 1
        assert kinds[ExecuteMapping] == kinds[ExecuteStreaming] == len(sol.invocations)

    def test_trace_encodes(self) -> None:
        sol = search(Workload("t", "t", 9, 13, 6), CFG)
        for ins in sol.trace:
            assert decode(encode(ins, CFG), CFG) == ins


class TestChain:
    LAYERS = [Workload("t", "a", 8, 8, 8), Workload("t", "b", 8, 8, 4)]

    def test_shape_mismatch(self) -> None:
        with pytest.raises(ShapeMismatch):
            chain_search([Workload("t", "a", 8, 8, 8), Workload("t", "b", 8, 4, 4)], CFG)

    def test_second_layer_skips_input_setup(self) -> None:
        res = chain_search(self.LAYERS, CFG)
        flat = list(res.trace)
        cut = next(i for i, ins in enumerate(flat)
                   if isinstance(ins, SetOVNLayout) and ins.commit != Commit.NONE)
        assert cut > 0
        assert not any(isinstance(ins, SetIVNLayout) for ins in flat[cut:])
        assert not any(isinstance(ins, Load) and ins.xfer.operand == Operand.I for ins in flat[cut:])

    def test_joint_optimum_over_cross_product(self) -> None:
        res = chain_search(self.LAYERS, CFG)
        best = None
        firsts = [c for c in knob_grid(self.LAYERS[0], CFG, reduced=True)
                  if chain_eligible(c, self.LAYERS[0], CFG, "first")]
        for c0 in firsts:
            s0 = evaluate(c0, self.LAYERS[0], CFG, TraceOptions(write_output=False))
            if not hasattr(s0, "latency"):
                continue
            fixed = boundary_layout(s0)
            for c1 in knob_grid(self.LAYERS[1], CFG, reduced=True):
                if not chain_eligible(c1, self.LAYERS[1], CFG, "last"):
                    continue
                s1 = evaluate(c1, self.LAYERS[1], CFG, TraceOptions(layer=1, chained_input=True), fixed)
                if not hasattr(s1, "latency"):
                    continue
                lat = schedule(chain_trace([s0, s1]), CFG).total_cycles
                best = lat if best is None else min(best, lat)
        assert res.latency == best
