"""Mapping-first, layout-second co-search producing minimum-latency MINISA traces.

Every knob combination of the grid is a :class:`Candidate`. A candidate is
turned into a program (layouts chosen constructively, then checked for
capacity, stream-read and output-port legality), lowered to a trace and
simulated; the simulated latency is the search objective.

With pruning on, candidates are visited in order of a closed-form lower
bound on their latency and the visit stops once no remaining bound can beat
(or tie with a smaller key) the incumbent. Knob combinations that produce
an identical program to a smaller-key combination are skipped.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchConfig
from .isa import (
    ActFunc, Commit, Dataflow, ExecuteMapping, ExecuteStreaming, FieldOutOfRange, LayoutSpec,
    Load, Operand, SetOVNLayout, SetWVNLayout, Trace, Write, instruction_bytes,
    trace_bytes,
)
from .layout import convert_operand
from .mapping import ACCEPT, Verdict
from .program import (
    BLOCK, CONSECUTIVE, INTERLEAVED, STRIDED, Candidate, Geometry, InfeasibleKnob,
    Layouts, TraceOptions, build_trace, cdiv, derive_layouts, pow2_ceil, resolve,
)
from .timing import SimReport, reduce_stages, schedule


class MapperError(RuntimeError):
    pass


class NoFeasibleCandidate(MapperError):
    pass


class ShapeMismatch(MapperError, ValueError):
    pass


class NoFeasibleChain(MapperError):
    pass


# --------------------------------------------------------------------------
# VN bookkeeping

@dataclass(frozen=True)
class VnShapes:
    i: tuple[int, int]  # (VN rows along K, M)
    w: tuple[int, int]  # (VN rows along K, N)
    o: tuple[int, int]  # (VN rows along N, M): N is the next layer's reduction


def lower_to_vns(workload, vn_size: int) -> VnShapes:
    kv = cdiv(workload.k, vn_size)
    return VnShapes((kv, workload.m), (kv, workload.n), (cdiv(workload.n, vn_size), workload.m))


def count_vn_groups(tile: tuple[int, int, int], cfg: ArchConfig) -> int:
    m_t, k_t, n_t = tile
    return m_t * cdiv(k_t, cfg.ah) * cdiv(n_t, cfg.ah)


def count_combined_groups(tile: tuple[int, int, int], cfg: ArchConfig) -> int:
    _, k_t, n_t = tile
    return cdiv(k_t, cfg.ah) * cdiv(n_t, cfg.ah)


# --------------------------------------------------------------------------
# candidates -> programs -> solutions

@dataclass
class Solution:
    candidate: Candidate
    workload: object
    cfg: ArchConfig
    geometry: Geometry
    layouts: Layouts
    plans: dict
    report: SimReport
    trace: Trace

    @property
    def latency(self) -> int:
        return self.report.total_cycles

    @property
    def invocations(self) -> list[tuple]:
        """All (EM, ES) pairs of the first tile of each tile shape."""
        return [p for plan in self.plans.values() for p in plan.pairs()]

    def as_row(self) -> dict:
        c = self.candidate
        row = {
            "name": self.workload.name, "M": self.workload.m, "K": self.workload.k,
            "N": self.workload.n, "ah": self.cfg.ah, "aw": self.cfg.aw,
            "dataflow": Dataflow(c.dataflow).name, "m_t": c.m_t, "k_t": c.k_t, "n_t": c.n_t,
            "n_col": c.n_col, "dup": c.dup, "wvn_stride": c.wvn_stride,
            "ivn_stride": c.ivn_stride, "vn_size": self.geometry.vn,
            "o_s": self.layouts.s.order_id, "o_x": self.layouts.x.order_id,
            "o_o": self.layouts.o.order_id, "f_x": self.layouts.x.f_nr_l0,
            "f_o": self.layouts.o.f_nr_l0, "raised": int(self.layouts.raised),
            "latency": self.latency, "utilization": round(self.report.utilization, 6),
        }
        return row


def candidate_to_program(cand: Candidate, workload, cfg: ArchConfig,
                         fixed_i: LayoutSpec | None = None):
    """(Layouts, [(EM, ES), ...]) of a candidate; pairs listed per tile shape."""
    g = resolve(cand, workload, cfg)
    lay, verdict = derive_layouts(g, cand, fixed_i)
    raised = lay.raised if lay is not None else True
    pairs = []
    for (xe, ke, ce), _ in g.variants():
        pairs.extend(g.plan(xe, ke, ce, raised).pairs())
    return lay, pairs


def _fixed_i_verdict(g: Geometry, fixed_i: LayoutSpec) -> Verdict:
    if fixed_i.vn_size != g.vn:
        return Verdict(False, "vn-size", ("chained input",))
    x_ext = g.xt if g.x_op == Operand.I else g.ct
    if fixed_i.f_red_l1 < g.kg or fixed_i.f_nr_l0 * fixed_i.f_nr_l1 < x_ext:
        return Verdict(False, "partition", ("chained input",))
    return ACCEPT


def _program(cand: Candidate, workload, cfg: ArchConfig, fixed_i=None):
    try:
        g = resolve(cand, workload, cfg)
    except InfeasibleKnob as exc:
        return None, None, Verdict(False, "knob", (str(exc),))
    if fixed_i is not None:
        v = _fixed_i_verdict(g, fixed_i)
        if not v:
            return g, None, v
    lay, v = derive_layouts(g, cand, fixed_i)
    return g, lay, v


def feasible(cand: Candidate, workload, cfg: ArchConfig, fixed_i: LayoutSpec | None = None) -> Verdict:
    g, lay, v = _program(cand, workload, cfg, fixed_i)
    if not v:
        return v
    try:
        trace_bytes(build_trace(g, lay), cfg)
    except FieldOutOfRange as exc:
        return Verdict(False, "field-range", (exc.field_name,))
    return ACCEPT


def evaluate(cand: Candidate, workload, cfg: ArchConfig, opts: TraceOptions = TraceOptions(),
             fixed_i: LayoutSpec | None = None) -> Solution | Verdict:
    """Feasibility check, trace generation and timing of one candidate."""
    g, lay, v = _program(cand, workload, cfg, fixed_i)
    if not v:
        return v
    trace = build_trace(g, lay, opts)
    try:
        trace_bytes(trace, cfg)
    except FieldOutOfRange as exc:
        return Verdict(False, "field-range", (exc.field_name,))
    report = schedule(trace, cfg)
    plans = {shape: g.plan(*shape, lay.raised) for shape, _ in g.variants()}
    return Solution(cand, workload, cfg, g, lay, plans, report, trace)


def generate_trace(solution: Solution, opts: TraceOptions | None = None) -> Trace:
    if opts is None:
        return solution.trace
    return build_trace(solution.geometry, solution.layouts, opts)


# --------------------------------------------------------------------------
# knob grid

def tile_values(total: int, unit: int) -> list[int]:
    """{unit * 2^i < total} plus total itself."""
    out, v = [], unit
    while v < total:
        out.append(v)
        v *= 2
    out.append(total)
    return out


def dup_pairs(aw: int) -> list[tuple[int, int]]:
    """(n_col, d) powers of two with n_col * d <= aw."""
    out = []
    n = 1
    while n <= aw:
        d = 1
        while n * d <= aw:
            out.append((n, d))
            d *= 2
        n *= 2
    return out


def vn_options(k: int, ah: int) -> list[int]:
    return [0] + ([k] if k < ah else [])


def _dims(workload, df: Dataflow) -> tuple[int, int, int]:
    if df == Dataflow.WOS:
        return workload.m, workload.k, workload.n
    return workload.n, workload.k, workload.m


def knob_grid(workload, cfg: ArchConfig, dataflows=(Dataflow.WOS, Dataflow.IOS),
              reduced: bool = False):
    """Every candidate of the grid; ``reduced`` drops exact duplicates.

    Duplicates: ``consecutive`` equals ``interleaved`` at d = 1 and
    ``strided`` equals ``block`` at n_col = 1 (identical instructions up to
    a field that does not affect the mapping).
    """
    ah, aw = cfg.ah, cfg.aw
    for df in dataflows:
        X, K, C = _dims(workload, df)
        for vn in vn_options(K, ah):
            kts = [K] if vn else tile_values(K, ah)
            for m_t in tile_values(X, ah):
                for k_t in kts:
                    for n_t in tile_values(C, 1):
                        for n_col, d in dup_pairs(aw):
                            for ws in (BLOCK, STRIDED):
                                if reduced and ws == STRIDED and n_col == 1:
                                    continue
                                for ist in (INTERLEAVED, CONSECUTIVE):
                                    if ist == CONSECUTIVE and (d > 1 or reduced):
                                        continue
                                    yield Candidate(df, m_t, k_t, n_t, n_col, d, ws, ist, vn)


# --------------------------------------------------------------------------
# closed-form lower bound

@dataclass(frozen=True)
class _Costs:
    em: int
    es: int
    set_layout: int
    set_o: int
    load: int
    write: int


def _fetch_costs(cfg: ArchConfig) -> _Costs:
    cyc = lambda k: cdiv(instruction_bytes(k, cfg), cfg.bw_instr)  # noqa: E731
    return _Costs(cyc(ExecuteMapping), cyc(ExecuteStreaming), cyc(SetWVNLayout),
                  cyc(SetOVNLayout), cyc(Load), cyc(Write))


def _sizes(total: int, tile: int):
    full, rem = divmod(total, tile)
    out = [(tile, full)] if full else []
    if rem:
        out.append((rem, 1))
    return out


def tile_lower_bounds(cfg: ArchConfig, df: Dataflow, vn: int, dims, tile,
                      n_col: np.ndarray, d: np.ndarray, costs: _Costs | None = None) -> np.ndarray:
    """Latency lower bound for every (n_col, d) pair at one tile choice.

    Bounds: first loads + all compute + one store; all loads + one store;
    all stores; all instruction fetch.
    """
    costs = costs or _fetch_costs(cfg)
    X, K, C = dims
    xt, kt, ct = min(tile[0], X), min(tile[1], K), min(tile[2], C)
    aw, red = cfg.aw, reduce_stages(cfg.aw)
    nx, nk, nc = cdiv(X, xt), cdiv(K, kt), cdiv(C, ct)
    G = n_col * d
    B = aw // G
    kg_full = cdiv(kt, vn)
    kr0 = kg_full % B
    kre = cdiv(K % kt, vn) % B
    krr = np.where(kr0 > 0, kr0, kre)
    safe = np.maximum(krr, 1)
    floor2 = 2 ** np.floor(np.log2(np.maximum(aw // (n_col * safe), 1))).astype(np.int64)
    dd = np.where(krr > 0, np.maximum(d, np.minimum(floor2, pow2_ceil(xt))), d)
    compute = np.zeros_like(n_col)
    pairs = np.zeros_like(n_col)
    for (xe, a), (ke, b), (ce, c) in itertools.product(_sizes(X, xt), _sizes(K, kt), _sizes(C, ct)):
        mult = a * b * c
        kg, ng = cdiv(ke, vn), cdiv(ce, vn)
        r_full, kr = kg // B, kg % B
        chunks = -(-ng // n_col)
        main = (-(-xe // d)) * vn + vn + red
        ldup = np.where(n_col * dd * kr <= aw, dd, d)
        left = (-(-xe // ldup)) * vn + vn + red
        compute += mult * chunks * (r_full * main + (kr > 0) * left)
        pairs += mult * chunks * (r_full + (kr > 0))
    bw_in, bw_out = cfg.bw_operand, cfg.bw_output
    eb, ab = cfg.elem_bytes, cfg.acc_bytes
    ld = lambda n: cdiv(n * eb, bw_in)  # noqa: E731
    xs, ks, cs = _sizes(X, xt), _sizes(K, kt), _sizes(C, ct)
    if nk == 1 and nc == 1:
        s_loads, s_cyc = 1, ld(K * C)
    elif nk == 1:
        s_loads = nx * nc
        s_cyc = nx * sum(m * ld(K * ce) for ce, m in cs)
    else:
        s_loads = nx * nc * nk
        s_cyc = nx * sum(m1 * m2 * ld(ke * ce) for ke, m1 in ks for ce, m2 in cs)
    if nk == 1:
        x_loads = nx
        x_cyc = sum(m * ld(xe * K) for xe, m in xs)
    else:
        x_loads = nx * nc * nk
        x_cyc = nc * sum(m1 * m2 * ld(xe * ke) for xe, m1 in xs for ke, m2 in ks)
    st = lambda n: cdiv(n * ab, bw_out)  # noqa: E731
    store = sum(m1 * m2 * st(xe * ce) for xe, m1 in xs for ce, m2 in cs)
    last_store = min(st(xe * ce) for xe, _ in xs for ce, _ in cs)
    first = ld(min(K, kt) * ct) + ld(xt * min(K, kt))
    o_tiles = nx * nc
    fetch = (pairs * (costs.em + costs.es)
             + (s_loads + x_loads) * (costs.set_layout + costs.load)
             + o_tiles * (costs.set_o + costs.write))
    lb = np.maximum.reduce([first + compute + last_store,
                            np.full_like(compute, s_cyc + x_cyc + last_store),
                            np.full_like(compute, store), fetch])
    return lb


@dataclass(order=True)
class _Entry:
    lb: int
    key: tuple
    cand: Candidate = field(compare=False)


def ranked_candidates(workload, cfg: ArchConfig, dataflows=(Dataflow.WOS, Dataflow.IOS)) -> list[_Entry]:
    """Reduced grid sorted by (lower bound, tie-break key)."""
    pairs = dup_pairs(cfg.aw)
    n_col = np.array([p[0] for p in pairs], dtype=np.int64)
    dup = np.array([p[1] for p in pairs], dtype=np.int64)
    costs = _fetch_costs(cfg)
    entries = []
    for df in dataflows:
        dims = _dims(workload, df)
        X, K, C = dims
        for vn_knob in vn_options(K, cfg.ah):
            vn = vn_knob or cfg.ah
            kts = [K] if vn_knob else tile_values(K, cfg.ah)
            for m_t in tile_values(X, cfg.ah):
                for k_t in kts:
                    for n_t in tile_values(C, 1):
                        lbs = tile_lower_bounds(cfg, df, vn, dims, (m_t, k_t, n_t), n_col, dup, costs)
                        for (nc_, d_), lb in zip(pairs, lbs.tolist()):
                            for ws in ((BLOCK,) if nc_ == 1 else (BLOCK, STRIDED)):
                                c = Candidate(df, m_t, k_t, n_t, nc_, d_, ws, INTERLEAVED, vn_knob)
                                entries.append(_Entry(int(lb), c.key(), c))
    entries.sort()
    return entries


# --------------------------------------------------------------------------
# search

@dataclass
class SearchStats:
    candidates: int = 0
    evaluated: int = 0
    infeasible: int = 0


def _better(sol: Solution, best: Solution | None) -> bool:
    if best is None:
        return True
    return (sol.latency, sol.candidate.key()) < (best.latency, best.candidate.key())


def search(workload, cfg: ArchConfig, pruning: bool = True, dataflows=(Dataflow.WOS, Dataflow.IOS),
           fixed_i: LayoutSpec | None = None, layout_knobs: dict | None = None,
           filter_fn=None, opts: TraceOptions = TraceOptions(), stats: SearchStats | None = None,
           jobs: int = 1) -> Solution:
    """Minimum-latency feasible solution; ties broken by the candidate key.

    ``layout_knobs`` fixes layout fields of every candidate (e.g. o_i, f_i,
    o_o, f_o for a layout-constrained search). ``filter_fn`` restricts the
    grid further (used by chaining). ``jobs`` is accepted for interface
    symmetry; parallelism happens across workloads in the sweep driver.
    """
    stats = stats if stats is not None else SearchStats()
    best: Solution | None = None

    def consider(cand: Candidate) -> None:
        nonlocal best
        if layout_knobs:
            cand = dataclasses.replace(cand, **layout_knobs)
        if filter_fn is not None and not filter_fn(cand):
            return
        stats.evaluated += 1
        sol = evaluate(cand, workload, cfg, opts, fixed_i)
        if isinstance(sol, Verdict):
            stats.infeasible += 1
            return
        if _better(sol, best):
            best = sol

    if pruning:
        entries = ranked_candidates(workload, cfg, dataflows)
        stats.candidates = len(entries)
        for e in entries:
            if best is not None and (e.lb, e.key) > (best.latency, best.candidate.key()):
                break
            consider(e.cand)
    else:
        for cand in knob_grid(workload, cfg, dataflows):
            stats.candidates += 1
            consider(cand)
    if best is None:
        raise NoFeasibleCandidate(f"no feasible candidate for {workload.name} on {cfg.name}")
    return best


# --------------------------------------------------------------------------
# multi-layer chaining

def _single_output(g: Geometry) -> bool:
    return g.nx == 1 and g.nc == 1


def _single_input(g: Geometry) -> bool:
    if g.nk != 1:
        return False
    return g.nx == 1 if g.x_op == Operand.I else g.nc == 1


def chain_eligible(cand: Candidate, workload, cfg: ArchConfig, position: str) -> bool:
    """Tiling condition for a layer at ``position`` in {first, middle, last}."""
    try:
        g = resolve(cand, workload, cfg)
    except InfeasibleKnob:
        return False
    if position in ("first", "middle") and not _single_output(g):
        return False
    if position in ("middle", "last") and not _single_input(g):
        return False
    return True


def boundary_layout(sol: Solution) -> LayoutSpec:
    """Input layout the next layer sees after this layer's output is committed."""
    return convert_operand(sol.layouts.o, Operand.I)


def _commit_for(sol: Solution) -> Commit:
    return Commit.STREAMING if sol.geometry.x_op == Operand.I else Commit.STATIONARY


def chain_trace(solutions: list[Solution], activation: ActFunc | None = None) -> Trace:
    items: list = []
    n = len(solutions)
    for i, sol in enumerate(solutions):
        opts = TraceOptions(layer=i, chained_input=i > 0, write_output=i == n - 1,
                            activation=activation if i < n - 1 else None)
        if i > 0:
            prev = solutions[i - 1]
            items.append(SetOVNLayout(prev.layouts.o, _commit_for(sol)))
        items.extend(build_trace(sol.geometry, sol.layouts, opts).items)
    return Trace(tuple(items))


@dataclass
class ChainResult:
    solutions: list[Solution]
    trace: Trace
    report: SimReport

    @property
    def latency(self) -> int:
        return self.report.total_cycles


def _layer_options(workload, cfg, position, layer, fixed_i=None, activation=None) -> list[Solution]:
    opts = TraceOptions(layer=layer, chained_input=position != "first",
                        write_output=position == "last",
                        activation=activation if position != "last" else None)
    out = []
    for cand in knob_grid(workload, cfg, reduced=True):
        if not chain_eligible(cand, workload, cfg, position):
            continue
        sol = evaluate(cand, workload, cfg, opts, fixed_i)
        if isinstance(sol, Solution):
            out.append(sol)
    out.sort(key=lambda s: (s.latency, s.candidate.key()))
    return out


def chain_search(layers, cfg: ArchConfig, activation: ActFunc | None = None) -> ChainResult:
    """Joint minimum of the chained trace latency over compatible layer choices.

    Layer i+1 reads layer i's output in place, so its input layout is fixed
    to the committed output layout. Each layer's stand-alone latency bounds
    the joint latency from below and prunes the enumeration.
    """
    layers = list(layers)
    if len(layers) < 2:
        raise ShapeMismatch("a chain needs at least two layers")
    for a, b in zip(layers, layers[1:]):
        if a.n != b.k:
            raise ShapeMismatch(f"{a.name}: N={a.n} does not match {b.name}: K={b.k}")
    n = len(layers)
    pos = lambda i: "first" if i == 0 else ("last" if i == n - 1 else "middle")  # noqa: E731
    cache: dict = {}

    def options(i: int, fixed: LayoutSpec | None) -> list[Solution]:
        key = (i, fixed)
        if key not in cache:
            cache[key] = _layer_options(layers[i], cfg, pos(i), i, fixed, activation)
        return cache[key]

    best: list = [None, None]  # (latency, keys), ChainResult

    def dfs(i: int, chosen: list[Solution], bound: int) -> None:
        fixed = boundary_layout(chosen[-1]) if chosen else None
        for sol in options(i, fixed):
            lb = max(bound, sol.latency)
            keys = tuple(s.candidate.key() for s in chosen + [sol])
            if best[0] is not None and (lb, keys) > best[0]:
                break
            if i == n - 1:
                trace = chain_trace(chosen + [sol], activation)
                report = schedule(trace, cfg)
                score = (report.total_cycles, keys)
                if best[0] is None or score < best[0]:
                    best[0] = score
                    best[1] = ChainResult(chosen + [sol], trace, report)
            else:
                dfs(i + 1, chosen + [sol], lb)

    dfs(0, [], 0)
    if best[1] is None:
        raise NoFeasibleChain("no compatible combination of layer solutions")
    return best[1]
