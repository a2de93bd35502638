"""Semantics of ExecuteMapping / ExecuteStreaming and their legality checks.

The stationary operand S sits in PE registers and the streaming operand X
flows down the columns. Under WO-S, S is W and X is I; under IO-S the roles
swap. A stationary VN is addressed ``(r, c)`` with ``r`` the reduction VN
row and ``c`` its non-reduction index; a streamed VN is ``(j, x)`` likewise.
PE ``(a_h, a_w)`` at step ``t`` produces the psum of output element
``(x, c)`` under WO-S and ``(c, x)`` under IO-S, in (m, n) coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .arch import ArchConfig, BufferGeometry
from .isa import Dataflow, LayoutSpec, MappingEM, MappingES
from .layout import NR1, flatten_index, in_partition, rank_strides


class MappingError(ValueError):
    pass


class MissingMapping(MappingError):
    pass


class ReductionMismatch(MappingError):
    pass


@dataclass(frozen=True)
class StationaryAssignment:
    r: np.ndarray  # (aw,) reduction VN row per column
    c: np.ndarray  # (ah, aw) non-reduction index per PE


@dataclass(frozen=True)
class StreamSchedule:
    j: np.ndarray  # (aw,) reduction VN row per column
    x: np.ndarray  # (T, aw) non-reduction index per step and column
    t: np.ndarray  # (T,) step numbers the rows correspond to


@dataclass(frozen=True)
class PsumTarget:
    m: np.ndarray     # (T, rows, aw)
    n: np.ndarray     # (T, rows, aw)
    live: np.ndarray  # (T, rows, aw) bool; False marks a dead psum


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str = ""
    where: tuple = ()

    def __bool__(self) -> bool:
        return self.ok


ACCEPT = Verdict(True)


def stationary_assignment(em: MappingEM, cfg: ArchConfig) -> StationaryAssignment:
    a_h = np.arange(cfg.ah)[:, None]
    a_w = np.arange(cfg.aw)[None, :]
    r = em.r0 + np.arange(cfg.aw) // em.g_r
    c = em.c0 + em.s_r * a_h + em.s_c * (a_w % em.g_c)
    return StationaryAssignment(r, c)


def streaming_schedule(em: MappingEM | None, es: MappingES, cfg: ArchConfig,
                       steps: np.ndarray | None = None) -> StreamSchedule:
    if em is None:
        raise MissingMapping("ExecuteStreaming without a preceding ExecuteMapping")
    t = np.arange(es.t) if steps is None else np.asarray(steps)
    a_w = np.arange(cfg.aw)
    j = em.r0 + a_w // em.g_r
    x = es.m0 + es.s_m * t[:, None] + ((a_w % em.g_r) // em.g_c)[None, :]
    return StreamSchedule(j, x, t)


def psum_targets(sa: StationaryAssignment, ss: StreamSchedule, df: Dataflow, rows: int,
                 s_layout: LayoutSpec | None = None,
                 x_layout: LayoutSpec | None = None) -> PsumTarget:
    """Output coordinates of every psum over the first ``rows`` PE rows."""
    if not np.array_equal(sa.r, ss.j):
        bad = int(np.nonzero(sa.r != ss.j)[0][0])
        raise ReductionMismatch(f"column {bad}: stationary r={sa.r[bad]} streaming j={ss.j[bad]}")
    c = sa.c[:rows][None, :, :]
    x = ss.x[:, None, :]
    c, x = np.broadcast_arrays(c, x)
    live = np.ones(c.shape, dtype=bool)
    if s_layout is not None:
        live &= in_partition(s_layout, sa.r[None, None, :], c)
    if x_layout is not None:
        live &= in_partition(x_layout, ss.j[None, None, :], x)
    if Dataflow(df) == Dataflow.WOS:
        return PsumTarget(x, c, live)
    return PsumTarget(c, x, live)


def check_stream_read_legality(ss: StreamSchedule, x_layout: LayoutSpec, geom: BufferGeometry,
                               live_cols: np.ndarray | None = None) -> Verdict:
    """Every step's distinct streamed VNs must sit in one slot row."""
    j = np.broadcast_to(ss.j[None, :], ss.x.shape)
    need = in_partition(x_layout, j, ss.x)
    if live_cols is not None:
        need &= np.broadcast_to(live_cols[None, :], need.shape)
    if not need.any():
        return ACCEPT
    L = np.where(need, flatten_index(x_layout, np.where(need, j, 0), np.where(need, ss.x, 0)), -1)
    row = np.where(need, L // geom.aw, -1)
    hi = np.where(need, row, np.iinfo(np.int64).min).max(axis=1)
    lo = np.where(need, row, np.iinfo(np.int64).max).min(axis=1)
    bad = np.nonzero(need.any(axis=1) & (hi != lo))[0]
    if bad.size:
        i = int(bad[0])
        cols = tuple(int(a) for a in np.nonzero(need[i])[0])
        return Verdict(False, "bank-conflict", (int(ss.t[i]), cols))
    return ACCEPT


def output_banks(targets: PsumTarget, o_layout: LayoutSpec, geom: BufferGeometry):
    """OVN slot index L and element of every psum target (valid where live)."""
    q = targets.n // o_layout.vn_size
    e = targets.n % o_layout.vn_size
    ok = targets.live & in_partition(o_layout, q, targets.m)
    L = np.where(ok, flatten_index(o_layout, np.where(ok, q, 0), np.where(ok, targets.m, 0)), -1)
    return L, e, ok


def check_output_legality(targets: PsumTarget, o_layout: LayoutSpec, geom: BufferGeometry,
                          cfg: ArchConfig | None = None, banks=None) -> Verdict:
    """Per commit cycle (step, PE row), merged targets must hit distinct banks.

    ``banks`` reuses a precomputed ``output_banks`` result.
    """
    L, e, ok = banks if banks is not None else output_banks(targets, o_layout, geom)
    if (targets.live & ~ok).any():
        return Verdict(False, "output-outside-layout")
    T, rows, aw = L.shape
    # unique target id per (step,row): (L, e); bank = L mod aw
    key = np.where(ok, L * o_layout.vn_size + e, -1).reshape(T * rows, aw)
    bank = np.where(ok, L % geom.aw, -1).reshape(T * rows, aw)
    order = np.argsort(key, axis=1, kind="stable")
    ks = np.take_along_axis(key, order, axis=1)
    bs = np.take_along_axis(bank, order, axis=1)
    first = np.ones_like(ks, dtype=bool)
    first[:, 1:] = ks[:, 1:] != ks[:, :-1]
    first &= ks >= 0
    # distinct targets -> their banks must be distinct
    bsel = np.where(first, bs, -1 - np.arange(aw)[None, :])
    bsorted = np.sort(bsel, axis=1)
    dup = (bsorted[:, 1:] == bsorted[:, :-1]) & (bsorted[:, 1:] >= 0)
    bad = np.nonzero(dup.any(axis=1))[0]
    if bad.size:
        i = int(bad[0])
        b = int(bsorted[i, 1:][dup[i]][0])
        return Verdict(False, "port-conflict", (i // rows, i % rows, b))
    return ACCEPT


def _period(s_m: int, modulus: int) -> int:
    return modulus // math.gcd(s_m, modulus) if s_m else 1


def representative_steps(es: MappingES, em: MappingEM, x_layout: LayoutSpec,
                         o_layout: LayoutSpec, df: Dataflow, aw: int) -> np.ndarray:
    """Steps whose checks imply the checks of every step of the invocation.

    Advancing ``t`` by a period shifts every streamed index by a multiple of
    the level-0 factor, which translates all linear indices uniformly. Bank
    distinctness is translation invariant; row sharing repeats once the
    translation is a multiple of ``aw``. Steps near the partition edge are
    returned explicitly.
    """
    T = es.t
    f_x = x_layout.f_nr_l0
    tau = _period(es.s_m, f_x)
    shift = (es.s_m * tau // f_x) * _nr1_stride(x_layout)
    p_stream = tau * (aw // math.gcd(shift % aw, aw))
    if Dataflow(df) == Dataflow.WOS:
        p_out = _period(es.s_m, o_layout.f_nr_l0)
    else:
        p_out = _period(es.s_m, o_layout.vn_size)
    period = math.lcm(p_stream, p_out)
    max_off = (min(em.g_r, aw) - 1) // em.g_c
    limit = x_layout.f_nr_l0 * x_layout.f_nr_l1
    # first step whose largest streamed index leaves the partition
    edge = min(T, max(0, -(-(limit - es.m0 - max_off) // es.s_m)))
    head = np.arange(min(period, edge))
    tail = np.arange(edge, T)
    tail = tail[es.m0 + es.s_m * tail < limit]
    return np.concatenate([head, tail])


def _nr1_stride(spec: LayoutSpec) -> int:
    return rank_strides(spec)[NR1]


def invocation_legality(em: MappingEM, es: MappingES, s_layout: LayoutSpec,
                        x_layout: LayoutSpec, o_layout: LayoutSpec,
                        geom: BufferGeometry, cfg: ArchConfig,
                        steps: np.ndarray | None = None) -> Verdict:
    """Stream-read and output-port legality of one EM/ES pair."""
    if steps is None:
        steps = representative_steps(es, em, x_layout, o_layout, es.df, cfg.aw)
    sa = stationary_assignment(em, cfg)
    ss = streaming_schedule(em, es, cfg, steps)
    live_col = in_partition(s_layout, sa.r, np.zeros_like(sa.r)) & (sa.c[: es.vn_size] < s_layout.f_nr_l0 * s_layout.f_nr_l1).any(axis=0)
    v = check_stream_read_legality(ss, x_layout, geom, live_col)
    if not v:
        return v
    targets = psum_targets(sa, ss, es.df, es.vn_size, s_layout, x_layout)
    return check_output_legality(targets, o_layout, geom, cfg)


def format_schedule(ss: StreamSchedule, df: Dataflow = Dataflow.WOS) -> str:
    """Per-step table of streamed VNs, one line per step."""
    name = "IVN" if Dataflow(df) == Dataflow.WOS else "WVN"
    lines = []
    for i, t in enumerate(ss.t):
        if name == "IVN":
            cells = [f"IVN({int(x)},{int(j)})" for j, x in zip(ss.j, ss.x[i])]
        else:
            cells = [f"WVN({int(j)},{int(x)})" for j, x in zip(ss.j, ss.x[i])]
        lines.append(f"t={int(t)}: " + " ".join(cells))
    return "\n".join(lines) + "\n"
