"""Translation of one mapper candidate into layouts, invocations and a trace.

Coordinates are generic: ``X`` is the streamed non-reduction dimension,
``C`` the stationary non-reduction dimension and ``K`` the reduction.
Under WO-S (X, C) = (M, N); under IO-S they swap to (N, M).

Per tile the reduction VN rows are covered in chunks of ``B = AW/(n_col*d)``
rows. Each chunk is one EM/ES pair; ``n_col`` column patterns cover
``n_col`` stationary VN columns side by side and ``d`` duplicate columns
split the stream. A final short chunk may use a larger duplication ``dd``.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass

from .arch import ArchConfig, buffer_geometry
from .isa import (
    ActDesc, ActFunc, Activation, Buffer, Dataflow, ExecuteMapping, ExecuteStreaming,
    LayoutSpec, Load, Loop, MappingEM, MappingES, Operand, SetIVNLayout, SetOVNLayout,
    SetWVNLayout, Trace, TransferDesc, Vary, Write,
)
from .layout import RED, check_layout, in_partition, physical_rows, rank_strides
from .mapping import (
    ACCEPT, Verdict, check_stream_read_legality, invocation_legality, representative_steps,
    stationary_assignment, streaming_schedule,
)

BLOCK, STRIDED = "block", "strided"
INTERLEAVED, CONSECUTIVE = "interleaved", "consecutive"
_STRIDE_RANK = {BLOCK: 0, STRIDED: 1, INTERLEAVED: 0, CONSECUTIVE: 1}

# operand orders used by the constructive derivation (role tuples outermost first)
X_ORDER = 4       # x_L1 -> j_L1 -> x_L0 for W and I
S_ORDER = 4       # c_L1 -> r_L1 -> c_L0
O_ORDER_PQP = 1   # p_L1 -> q_L1 -> p_L0
O_ORDER_P0QP1 = 3  # p_L0 -> q_L1 -> p_L1


class InfeasibleKnob(ValueError):
    pass


def pow2_ceil(n: int) -> int:
    return 1 << max(0, (int(n) - 1).bit_length())


def pow2_floor(n: int) -> int:
    return 1 << (int(n).bit_length() - 1) if n >= 1 else 0


def cdiv(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class Candidate:
    """One point of the mapper knob grid.

    Tile sizes are in (M_s, K_s, N_s) coordinates: ``m_t`` tiles the streamed
    dimension and ``n_t`` the stationary one. Layout knobs left as ``None``
    are derived constructively; fixed values restrict the layout choice.
    """

    dataflow: Dataflow
    m_t: int
    k_t: int
    n_t: int
    n_col: int = 1
    dup: int = 1
    wvn_stride: str = BLOCK
    ivn_stride: str = INTERLEAVED
    vn_size: int = 0
    o_w: int | None = None
    o_i: int | None = None
    o_o: int | None = None
    f_w: int | None = None
    f_i: int | None = None
    f_o: int | None = None

    def key(self) -> tuple:
        """Deterministic tie-break order."""
        df_rank = 0 if Dataflow(self.dataflow) == Dataflow.WOS else 1
        orders = tuple(-1 if v is None else v for v in (self.o_w, self.o_i, self.o_o,
                                                       self.f_w, self.f_i, self.f_o))
        return (df_rank, self.m_t, self.k_t, self.n_t, *orders, self.n_col, self.dup,
                _STRIDE_RANK[self.wvn_stride], _STRIDE_RANK[self.ivn_stride], self.vn_size)

    def __lt__(self, other: "Candidate") -> bool:
        return self.key() < other.key()


@dataclass(frozen=True)
class InvocationPlan:
    """EM/ES pairs of one tile, compressed: chunks over c, then over r."""

    n_chunks: int
    c_step: int
    r_full: int
    block: int
    main: tuple | None
    left: tuple | None

    def pairs(self) -> list[tuple[MappingEM, MappingES]]:
        out = []
        for ci in range(self.n_chunks):
            dc = ci * self.c_step
            for ri in range(self.r_full):
                em, es = self.main
                out.append((dataclasses.replace(em, r0=em.r0 + ri * self.block, c0=em.c0 + dc), es))
            if self.left is not None:
                em, es = self.left
                out.append((dataclasses.replace(em, c0=em.c0 + dc), es))
        return out

    @property
    def count(self) -> int:
        return self.n_chunks * (self.r_full + (self.left is not None))


def _sizes(total: int, tile: int) -> list[tuple[int, int]]:
    """(extent, multiplicity) of the tiles along one dimension."""
    full, rem = divmod(total, tile)
    out = [(tile, full)] if full else []
    if rem:
        out.append((rem, 1))
    return out


@dataclass(frozen=True)
class Geometry:
    """Workload and knobs resolved into generic (X, K, C) coordinates."""

    cfg: ArchConfig
    df: Dataflow
    vn: int
    X: int
    K: int
    C: int
    xt: int
    kt: int
    ct: int
    n_col: int
    d: int
    s_r: int
    s_c: int
    interleaved: bool
    dd: int

    @property
    def s_op(self) -> Operand:
        return Operand.W if self.df == Dataflow.WOS else Operand.I

    @property
    def x_op(self) -> Operand:
        return Operand.I if self.df == Dataflow.WOS else Operand.W

    @property
    def nx(self) -> int:
        return cdiv(self.X, self.xt)

    @property
    def nk(self) -> int:
        return cdiv(self.K, self.kt)

    @property
    def nc(self) -> int:
        return cdiv(self.C, self.ct)

    @property
    def kg(self) -> int:
        return cdiv(self.kt, self.vn)

    def variants(self):
        """((xe, ke, ce), multiplicity) over all tiles."""
        for xe, a in _sizes(self.X, self.xt):
            for ke, b in _sizes(self.K, self.kt):
                for ce, c in _sizes(self.C, self.ct):
                    yield (xe, ke, ce), a * b * c

    def plan(self, xe: int, ke: int, ce: int, raise_dup: bool = True) -> InvocationPlan:
        aw, vn, n_col, d = self.cfg.aw, self.vn, self.n_col, self.d
        kg, ng = cdiv(ke, vn), cdiv(ce, vn)
        B = aw // (n_col * d)
        r_full, kr = divmod(kg, B)
        df = self.df

        def pair(r0: int, dup: int):
            s_m = dup if self.interleaved else 1
            em = MappingEM(r0, 0, n_col * dup, n_col, self.s_r, self.s_c)
            es = MappingES(0, s_m, cdiv(xe, dup), vn, df)
            return em, es

        main = pair(0, d) if r_full else None
        left = None
        if kr:
            dd = self.dd if raise_dup and n_col * self.dd * kr <= aw else d
            left = pair(r_full * B, dd)
        return InvocationPlan(cdiv(ng, n_col), n_col * vn, r_full, B, main, left)


def resolve(cand: Candidate, wl, cfg: ArchConfig) -> Geometry:
    """Apply the knob invariants; raise InfeasibleKnob when they fail."""
    df = Dataflow(cand.dataflow)
    ah, aw = cfg.ah, cfg.aw
    vn = cand.vn_size or ah
    if not 1 <= vn <= ah:
        raise InfeasibleKnob(f"vn_size {vn} outside [1, {ah}]")
    if df == Dataflow.WOS:
        X, C = wl.m, wl.n
    else:
        X, C = wl.n, wl.m
    K = wl.k
    if min(cand.m_t, cand.k_t, cand.n_t) < 1:
        raise InfeasibleKnob("tile sizes must be positive")
    xt, kt, ct = min(cand.m_t, X), min(cand.k_t, K), min(cand.n_t, C)
    n_col, d = cand.n_col, cand.dup
    if n_col < 1 or d < 1 or n_col * d > aw:
        raise InfeasibleKnob(f"n_col*d = {n_col * d} exceeds AW = {aw}")
    if aw % (n_col * d):
        raise InfeasibleKnob("n_col*d must divide AW")
    if cand.wvn_stride not in (BLOCK, STRIDED) or cand.ivn_stride not in (INTERLEAVED, CONSECUTIVE):
        raise InfeasibleKnob("unknown stride knob")
    interleaved = cand.ivn_stride == INTERLEAVED
    if not interleaved and d > 1:
        raise InfeasibleKnob("consecutive streaming cannot split a stream over duplicates")
    s_r, s_c = (1, vn) if cand.wvn_stride == BLOCK else (n_col, 1)
    # raised duplication for a short final chunk
    dd = d
    if interleaved:
        kg_full = cdiv(kt, vn)
        kr = kg_full % (aw // (n_col * d)) or cdiv(K % kt, vn) % (aw // (n_col * d))
        if kr:
            dd = max(d, min(pow2_floor(aw // (n_col * kr)), pow2_ceil(xt)))
    return Geometry(cfg, df, vn, X, K, C, xt, kt, ct, n_col, d, s_r, s_c, interleaved, dd)


# --------------------------------------------------------------------------
# layouts

@dataclass(frozen=True)
class Layouts:
    s: LayoutSpec
    x: LayoutSpec
    o: LayoutSpec
    raised: bool

    def of(self, op: Operand) -> LayoutSpec:
        for spec in (self.s, self.x, self.o):
            if spec.operand == op:
                return spec
        raise KeyError(op)


def _x_options(g: Geometry, F: int, cand: Candidate):
    fixed_o = cand.o_i if g.x_op == Operand.I else cand.o_w
    fixed_f = cand.f_i if g.x_op == Operand.I else cand.f_w
    order = X_ORDER if fixed_o is None else fixed_o
    f = F if fixed_f is None else fixed_f
    J = pow2_ceil(g.kg)
    yield LayoutSpec(g.x_op, g.vn, J, f, cdiv(g.xt, f), order)
    if fixed_o is None and J != g.kg:
        yield LayoutSpec(g.x_op, g.vn, g.kg, f, cdiv(g.xt, f), order)


def _s_spec(g: Geometry, cand: Candidate) -> LayoutSpec:
    fixed_o = cand.o_w if g.s_op == Operand.W else cand.o_i
    fixed_f = cand.f_w if g.s_op == Operand.W else cand.f_i
    f = min(g.cfg.aw, g.ct) if fixed_f is None else fixed_f
    order = S_ORDER if fixed_o is None else fixed_o
    return LayoutSpec(g.s_op, g.vn, g.kg, f, cdiv(g.ct, f), order)


def _o_options(g: Geometry, F: int, s: LayoutSpec, x: LayoutSpec, cand: Candidate):
    cp = s.f_nr_l0 * s.f_nr_l1
    xp = x.f_nr_l0 * x.f_nr_l1
    if g.df == Dataflow.WOS:
        Q, P = cdiv(cp, g.vn), xp
    else:
        Q, P = cdiv(xp, g.vn), cp
    aw = g.cfg.aw
    if cand.o_o is not None or cand.f_o is not None:
        order = O_ORDER_PQP if cand.o_o is None else cand.o_o
        f = min(F, aw) if cand.f_o is None else cand.f_o
        yield LayoutSpec(Operand.O, g.vn, Q, f, cdiv(P, f), order)
        return
    seen = set()
    for order, f in ((O_ORDER_PQP, F), (O_ORDER_PQP, aw), (O_ORDER_P0QP1, g.vn), (O_ORDER_PQP, 1)):
        f = max(1, min(f, aw, pow2_ceil(P)))
        if (order, f) in seen:
            continue
        seen.add((order, f))
        yield LayoutSpec(Operand.O, g.vn, Q, f, cdiv(P, f), order)


def _alt_rows(depth: int, vn: int) -> int:
    return (depth // 2) // vn


def region_plan(g: Geometry) -> dict[str, int]:
    """Slot-row offset of the second region per operand (0 = single region)."""
    geom = buffer_geometry(g.cfg)
    s_loads = g.nk * g.nc
    x_loads = g.nx * g.nk
    o_tiles = g.nx * g.nc
    return {
        "s": _alt_rows(geom.d_sta, g.vn) if s_loads > 1 else 0,
        "x": _alt_rows(geom.d_str, g.vn) if x_loads > 1 else 0,
        "o": _alt_rows(geom.d_out, g.vn) if o_tiles > 1 else 0,
    }


def capacity_verdict(spec: LayoutSpec, g: Geometry, buffer: str, alt: int) -> Verdict:
    geom = buffer_geometry(g.cfg)
    v = check_layout(spec, geom, g.cfg.ah, buffer)
    if not v:
        return Verdict(False, v.reasons[0], (buffer,))
    if alt and spec.num_vns > alt * g.cfg.aw:
        return Verdict(False, "capacity", (buffer,))
    return ACCEPT


# --------------------------------------------------------------------------
# legality over all invocations

def _reps(n: int, period: int) -> list[int]:
    head = list(range(min(n, period)))
    if n and n - 1 not in head:
        head.append(n - 1)
    return head


def _shift_em(em: MappingEM, dr: int, dc: int) -> MappingEM:
    return dataclasses.replace(em, r0=em.r0 + dr, c0=em.c0 + dc)


def plan_legality(g: Geometry, plan: InvocationPlan, lay: Layouts) -> Verdict:
    """Stream-read and output legality of every pair of one tile.

    Checks are done on representative c-chunks (first, last) and r-chunks
    (one period of the streamed-index translation plus the last one).
    """
    cfg, geom = g.cfg, buffer_geometry(g.cfg)
    s, x, o = lay.s, lay.x, lay.o
    c_reps = _reps(plan.n_chunks, 1)
    if plan.main is not None:
        em, es = plan.main
        shift = (plan.block * rank_strides(x)[RED]) % cfg.aw
        r_period = cfg.aw // math.gcd(shift, cfg.aw) if shift else 1
        for ci in c_reps:
            for n, ri in enumerate(_reps(plan.r_full, r_period)):
                e = _shift_em(em, ri * plan.block, ci * plan.c_step)
                if n == 0:
                    v = invocation_legality(e, es, s, x, o, geom, cfg)
                else:
                    v = _stream_only(e, es, s, x, o, geom, cfg)
                if not v:
                    return v
    if plan.left is not None:
        em, es = plan.left
        for ci in c_reps:
            v = invocation_legality(_shift_em(em, 0, ci * plan.c_step), es, s, x, o, geom, cfg)
            if not v:
                return v
    return ACCEPT


def _stream_only(em, es, s, x, o, geom, cfg) -> Verdict:
    steps = representative_steps(es, em, x, o, es.df, cfg.aw)
    sa = stationary_assignment(em, cfg)
    ss = streaming_schedule(em, es, cfg, steps)
    live = in_partition(s, sa.r, 0) & (sa.c[: es.vn_size] < s.f_nr_l0 * s.f_nr_l1).any(axis=0)
    return check_stream_read_legality(ss, x, geom, live)


def derive_layouts(g: Geometry, cand: Candidate,
                   fixed_i: LayoutSpec | None = None) -> tuple[Layouts | None, Verdict]:
    """First legal (layouts, raise) choice from the canonical option lists.

    ``fixed_i`` pins the input layout (e.g. the previous layer's output).
    """
    alts = region_plan(g)
    fixed_x = fixed_i if fixed_i is not None and g.x_op == Operand.I else None
    s = fixed_i if fixed_i is not None and g.s_op == Operand.I else _s_spec(g, cand)
    v = capacity_verdict(s, g, "stationary", alts["s"])
    if not v:
        return None, v
    variants = list(g.variants())
    first_fail = None
    raise_opts = (True, False) if g.dd > g.d else (False,)
    for raised in raise_opts:
        F = g.dd if raised else g.d
        xs = [fixed_x] if fixed_x is not None else list(_x_options(g, F, cand))
        for x in xs:
            v = capacity_verdict(x, g, "streaming", alts["x"])
            if not v:
                first_fail = v if first_fail is None else first_fail
                continue
            for o in _o_options(g, F, s, x, cand):
                v = capacity_verdict(o, g, "output", alts["o"])
                if not v:
                    first_fail = v if first_fail is None else first_fail
                    continue
                lay = Layouts(s, x, o, raised)
                for (xe, ke, ce), _ in variants:
                    v = plan_legality(g, g.plan(xe, ke, ce, raised), lay)
                    if not v:
                        break
                if v:
                    return lay, ACCEPT
                first_fail = v if first_fail is None else first_fail
    return None, Verdict(False, "no-layout") if first_fail is None else first_fail


# --------------------------------------------------------------------------
# trace generation

def _int_diff(a, b, path: tuple, out: list, prefix: str = "") -> None:
    """Collect (path, field, delta) of integer fields that differ."""
    if isinstance(a, Loop):
        if a.count != b.count or a.vary != b.vary:
            raise ValueError("loop structure differs between iterations")
        for i, (x, y) in enumerate(zip(a.body, b.body)):
            _int_diff(x, y, path + (i,), out)
        return
    if type(a) is not type(b):
        raise ValueError("instruction kinds differ between iterations")
    for f in dataclasses.fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        name = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(x):
            _int_diff(x, y, path, out, name + ".")
        elif x != y:
            if isinstance(x, (bool, enum.Enum)) or not isinstance(x, int):
                raise ValueError(f"non-integer field {name} varies")
            out.append((path, name, int(y) - int(x)))


def _body_diff(a: list, b: list) -> list[tuple]:
    out: list = []
    if len(a) != len(b):
        raise ValueError("loop bodies differ in length")
    for i, (x, y) in enumerate(zip(a, b)):
        _int_diff(x, y, (i,), out)
    return out


def repeat(body_fn, count: int) -> list:
    """``count`` copies of ``body_fn(i)`` as one Loop.

    Fields must change linearly in ``i`` plus an optional two-cycle
    alternation (double-buffered regions); both are read off iterations
    0, 1 and 2.
    """
    if count <= 0:
        return []
    b0 = list(body_fn(0))
    if count == 1:
        return b0
    b1 = list(body_fn(1))
    if count == 2:
        return b0 + b1
    b2 = list(body_fn(2))
    lin = {(p, f): dlt for p, f, dlt in _body_diff(b0, b2)}
    step = {(p, f): dlt for p, f, dlt in _body_diff(b0, b1)}
    varies = []
    for key in sorted(set(lin) | set(step)):
        two = lin.get(key, 0)
        one = step.get(key, 0)
        if two % 2 == 0 and one * 2 == two:
            varies.append(Vary(key[0], key[1], one))
        elif two % 2 == 0:
            varies.append(Vary(key[0], key[1], two // 2, (0, one - two // 2)))
        else:
            raise ValueError(f"field {key[1]} is not linear-plus-alternating")
    loop = Loop(tuple(b0), count, tuple(varies))
    if count > 3 and list(loop.iteration(count - 1)) != list(body_fn(count - 1)):
        raise ValueError("last iteration does not follow the inferred pattern")
    return [loop]


@dataclass(frozen=True)
class TraceOptions:
    layer: int = 0
    chained_input: bool = False   # I already resident from the previous layer
    write_output: bool = True     # False when the next layer consumes O on chip
    activation: ActFunc | None = None


def tensor_ids(layer: int) -> dict[Operand, int]:
    return {Operand.I: 3 * layer, Operand.W: 3 * layer + 1, Operand.O: 3 * layer + 2}


class TraceBuilder:
    def __init__(self, g: Geometry, lay: Layouts, opts: TraceOptions = TraceOptions()):
        self.g, self.lay, self.opts = g, lay, opts
        self.alts = region_plan(g)
        if opts.chained_input:
            self.alts["x" if g.x_op == Operand.I else "s"] = 0
        self.ids = tensor_ids(opts.layer)
        self.geom = buffer_geometry(g.cfg)

    # ----------------------------------------------------------- primitives
    def _spec(self, role: str, parity: int) -> LayoutSpec:
        spec = {"s": self.lay.s, "x": self.lay.x, "o": self.lay.o}[role]
        return dataclasses.replace(spec, base=spec.base + parity * self.alts[role])

    def _origin(self, op: Operand, x: int, k: int, c: int, xe: int, ke: int, ce: int):
        wos = self.g.df == Dataflow.WOS
        if op == Operand.O:
            return ((x, c, xe, ce) if wos else (c, x, ce, xe))
        if op == self.g.x_op:
            return ((x, k, xe, ke) if op == Operand.I else (k, x, ke, xe))
        return ((k, c, ke, ce) if op == Operand.W else (c, k, ce, ke))

    def _skip(self, role: str) -> bool:
        op = self.g.x_op if role == "x" else self.g.s_op
        return self.opts.chained_input and op == Operand.I

    def _load(self, role: str, parity: int, x, k, c, xe, ke, ce) -> list:
        if self._skip(role):
            return []
        spec = self._spec(role, parity)
        op = spec.operand
        start, rows = physical_rows(spec, self.geom)
        o_r, o_c, e_r, e_c = self._origin(op, x, k, c, xe, ke, ce)
        buf = Buffer.STREAMING if role == "x" else Buffer.STATIONARY
        set_cls = SetIVNLayout if op == Operand.I else SetWVNLayout
        return [set_cls(spec),
                Load(TransferDesc(buf, op, self.ids[op], start, rows, o_r, o_c, e_r, e_c))]

    def _invocations(self, xe: int, ke: int, ce: int) -> list:
        plan = self.g.plan(xe, ke, ce, self.lay.raised)

        def chunk(ci: int) -> list:
            items = repeat(lambda ri: _pair(plan.main, ri * plan.block, ci * plan.c_step), plan.r_full)
            if plan.left is not None:
                items += _pair(plan.left, 0, ci * plan.c_step)
            return items

        return repeat(chunk, plan.n_chunks)

    # ----------------------------------------------------------- nesting
    def build(self) -> Trace:
        g = self.g
        items: list = []
        single_s = g.nk == 1 and g.nc == 1
        if single_s:
            items += self._load("s", 0, 0, 0, 0, g.xt, g.K, g.C)
        items += self._tiled(g.X, g.xt, lambda xe, p, x0: self._x_body(xe, p, x0))
        return Trace(tuple(items))

    def _tiled(self, total: int, tile: int, fn) -> list:
        full, rem = divmod(total, tile)
        items = repeat(lambda i: fn(tile, i % 2, i * tile), full)
        if rem:
            items += fn(rem, full % 2, full * tile)
        return items

    def _x_body(self, xe: int, px: int, x0: int) -> list:
        g = self.g
        items: list = []
        if g.nk == 1:
            items += self._load("x", px, x0, 0, 0, xe, g.K, g.ct)
        items += self._tiled(g.C, g.ct, lambda ce, pc, c0: self._c_body(xe, x0, ce, pc, c0))
        return items

    def _c_body(self, xe: int, x0: int, ce: int, pc: int, c0: int) -> list:
        g = self.g
        o_spec = self._spec("o", pc)
        items: list = [SetOVNLayout(o_spec)]
        if g.nk == 1 and g.nc > 1:
            items += self._load("s", pc, x0, 0, c0, xe, g.K, ce)
        if g.nk == 1:
            items += self._invocations(xe, g.K, ce)
        else:
            items += self._tiled(g.K, g.kt, lambda ke, pk, k0: (
                self._load("s", pk, x0, k0, c0, xe, ke, ce)
                + self._load("x", pk, x0, k0, c0, xe, ke, ce)
                + self._invocations(xe, ke, ce)))
        start, rows = physical_rows(o_spec, self.geom)
        if self.opts.activation is not None:
            items.append(Activation(ActDesc(Buffer.OUTPUT, self.opts.activation, start, rows)))
        if self.opts.write_output:
            o_r, o_c, e_r, e_c = self._origin(Operand.O, x0, 0, c0, xe, 0, ce)
            items.append(Write(TransferDesc(Buffer.OUTPUT, Operand.O, self.ids[Operand.O],
                                            start, rows, o_r, o_c, e_r, e_c)))
        return items


def _pair(pair, dr: int, dc: int) -> list:
    em, es = pair
    return [ExecuteMapping(_shift_em(em, dr, dc)), ExecuteStreaming(es)]


def build_trace(g: Geometry, lay: Layouts, opts: TraceOptions = TraceOptions()) -> Trace:
    return TraceBuilder(g, lay, opts).build()
