"""Functional execution of MINISA traces plus the combined ``execute_trace``.

The functional pass keeps exact integer buffer images and interprets every
instruction in program order. Timing comes from :mod:`minisa.timing` in a
separate pass, so values never depend on the latency model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arch import ArchConfig, buffer_geometry
from .isa import (
    ActFunc, Activation, Buffer, Commit, Dataflow, ExecuteMapping, ExecuteStreaming, Load,
    Operand, SetIVNLayout, SetOVNLayout, SetWVNLayout, Trace, Write, check_trace,
)
from .layout import CapacityExceeded, convert_operand, flatten_index, gather, in_partition, materialize
from .mapping import (
    MissingMapping, PsumTarget, check_output_legality, check_stream_read_legality, output_banks,
    psum_targets, stationary_assignment, streaming_schedule,
)
from .timing import SimReport, schedule, tile_cycles

ACC_MIN, ACC_MAX = -(2 ** 31), 2 ** 31 - 1


class SimulationError(RuntimeError):
    pass


class MissingTensor(SimulationError):
    pass


class LegalityViolation(SimulationError):
    pass


class AccumulatorOverflow(ArithmeticError):
    pass


def reference_gemm(I: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Exact integer product with a 32-bit accumulator range check."""
    I = np.asarray(I, dtype=np.int64)
    W = np.asarray(W, dtype=np.int64)
    if I.ndim != 2 or W.ndim != 2 or I.shape[1] != W.shape[0]:
        raise ValueError(f"shapes {I.shape} and {W.shape} do not conform")
    out = I @ W
    # bound every partial sum, not only the final value
    bound = np.abs(I) @ np.abs(W)
    if out.size and (bound.max() > ACC_MAX):
        partial = np.cumsum(I[:, :, None] * W[None, :, :], axis=1)
        if partial.min() < ACC_MIN or partial.max() > ACC_MAX:
            raise AccumulatorOverflow("partial sum exceeds the 32-bit accumulator")
    return out


# tensor ids used by generated traces: layer l owns ids 3l (I), 3l+1 (W), 3l+2 (O)
def tensor_id(layer: int, operand: Operand) -> int:
    return 3 * layer + int(operand)


@dataclass
class MachineState:
    cfg: ArchConfig
    images: dict = field(default_factory=dict)
    layouts: dict = field(default_factory=dict)
    em: object = None
    offchip: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, cfg: ArchConfig, offchip: dict) -> "MachineState":
        g = buffer_geometry(cfg)
        images = {
            Buffer.STREAMING: np.zeros((g.d_str, cfg.aw), dtype=np.int64),
            Buffer.STATIONARY: np.zeros((g.d_sta, cfg.aw), dtype=np.int64),
            Buffer.OUTPUT: np.zeros((g.d_out, cfg.aw), dtype=np.int64),
        }
        return cls(cfg, images, {}, None, {k: np.asarray(v) for k, v in offchip.items()})


def _as_tile(arr: np.ndarray, operand: Operand) -> np.ndarray:
    """Off-chip orientation -> (reduction x non-reduction)."""
    return arr if operand == Operand.W else arr.T


@dataclass(frozen=True)
class _TileAddressing:
    s_idx: tuple      # stationary buffer (row, col) index arrays, (rows, aw, vn)
    s_ok: np.ndarray
    x_idx: tuple      # streaming buffer index arrays, (T, aw, vn)
    x_ok: np.ndarray
    out_idx: tuple    # output buffer (row, col) of every live psum
    live: np.ndarray  # (T, rows, aw)


class FunctionalSimulator:
    def __init__(self, cfg: ArchConfig, offchip: dict, check_legality: bool = True):
        self.cfg = cfg
        self._tiles: dict = {}
        self.geom = buffer_geometry(cfg)
        self.state = MachineState.fresh(cfg, offchip)
        self.check = check_legality

    def run(self, trace: Trace) -> dict:
        check_trace(trace)
        for instr in trace:
            self.step(instr)
        return self.state.offchip

    def _buffer_name(self, buffer: Buffer) -> str:
        return Buffer(buffer).key

    def step(self, instr) -> None:
        st = self.state
        if isinstance(instr, (SetIVNLayout, SetWVNLayout)):
            st.layouts[instr.layout.operand] = instr.layout
        elif isinstance(instr, SetOVNLayout):
            self._set_output(instr)
        elif isinstance(instr, ExecuteMapping):
            st.em = instr.em
        elif isinstance(instr, ExecuteStreaming):
            self._execute(instr.es)
        elif isinstance(instr, Load):
            self._load(instr.xfer)
        elif isinstance(instr, Write):
            self._write(instr.xfer)
        elif isinstance(instr, Activation):
            a = instr.act
            img = st.images[a.buffer]
            rows = slice(a.row_start, a.row_start + a.row_count)
            if a.func == ActFunc.RELU:
                np.maximum(img[rows], 0, out=img[rows])
        else:
            raise TypeError(f"not an instruction: {instr!r}")

    def _layout(self, operand: Operand):
        spec = self.state.layouts.get(operand)
        if spec is None:
            raise SimulationError(f"no layout set for operand {operand.name}")
        return spec

    def _load(self, x) -> None:
        st = self.state
        if x.tensor not in st.offchip:
            raise MissingTensor(f"tensor {x.tensor} not present off-chip")
        spec = self._layout(x.operand)
        if spec.base * spec.vn_size != x.row_start:
            raise SimulationError("Load region does not match the operand's layout base")
        src = st.offchip[x.tensor][x.origin_row:x.origin_row + x.ext_rows,
                                   x.origin_col:x.origin_col + x.ext_cols]
        try:
            materialize(_as_tile(src, x.operand), spec, self.geom, self._buffer_name(x.buffer),
                        st.images[x.buffer])
        except IndexError as exc:
            raise CapacityExceeded(str(exc)) from None

    def _write(self, x) -> None:
        st = self.state
        spec = self._layout(x.operand)
        red = spec.f_red_l1 * spec.vn_size
        nr = spec.f_nr_l0 * spec.f_nr_l1
        tile = gather(st.images[x.buffer], spec, self.geom, (red, nr))
        tile = tile if x.operand == Operand.W else tile.T
        block = tile[: x.ext_rows, : x.ext_cols]
        need = (x.origin_row + x.ext_rows, x.origin_col + x.ext_cols)
        dst = st.offchip.get(x.tensor)
        if dst is None:
            dst = np.zeros(need, dtype=np.int64)
        elif dst.shape[0] < need[0] or dst.shape[1] < need[1]:
            grown = np.zeros((max(dst.shape[0], need[0]), max(dst.shape[1], need[1])), dtype=np.int64)
            grown[: dst.shape[0], : dst.shape[1]] = dst
            dst = grown
        else:
            dst = dst.astype(np.int64, copy=True)
        dst[x.origin_row:need[0], x.origin_col:need[1]] = block
        st.offchip[x.tensor] = dst

    def _set_output(self, instr: SetOVNLayout) -> None:
        st = self.state
        old = st.layouts.get(Operand.O)
        if instr.commit != Commit.NONE and old is not None:
            target = Buffer.STREAMING if instr.commit == Commit.STREAMING else Buffer.STATIONARY
            start, rows = old.base * old.vn_size, -(-old.num_vns // self.cfg.aw) * old.vn_size
            dst = st.images[target]
            if start + rows > dst.shape[0]:
                raise CapacityExceeded("committed output does not fit the operand buffer")
            dst[start:start + rows] = st.images[Buffer.OUTPUT][start:start + rows]
            st.layouts[Operand.I] = convert_operand(old, Operand.I)
        spec = instr.layout
        start = spec.base * spec.vn_size
        rows = -(-spec.num_vns // self.cfg.aw) * spec.vn_size
        out = st.images[Buffer.OUTPUT]
        if start + rows > out.shape[0]:
            raise CapacityExceeded("output layout exceeds the output buffer")
        out[start:start + rows] = 0
        st.layouts[Operand.O] = spec

    def _vn_index(self, spec, r, c):
        """Buffer (row, col) index arrays (..., vn) of VN coordinates, plus the in-partition mask."""
        ok = in_partition(spec, r, c)
        L = flatten_index(spec, np.where(ok, r, 0), np.where(ok, c, 0))
        rows = (spec.base + L // self.cfg.aw)[..., None] * spec.vn_size + np.arange(spec.vn_size)
        cols = np.broadcast_to((L % self.cfg.aw)[..., None], rows.shape)
        return rows, cols, ok

    def _addressing(self, em, es, s_spec, x_spec, o_spec) -> _TileAddressing:
        """Checked addressing of one invocation; a pure function of its key, so cached."""
        key = (em, es, s_spec, x_spec, o_spec)
        hit = self._tiles.get(key)
        if hit is not None:
            return hit
        cfg = self.cfg
        sa = stationary_assignment(em, cfg)
        ss = streaming_schedule(em, es, cfg)
        rows = es.vn_size
        r_cols = np.broadcast_to(sa.r[None, :], (rows, cfg.aw))
        s_row, s_col, s_ok = self._vn_index(s_spec, r_cols, sa.c[:rows])
        j = np.broadcast_to(ss.j[None, :], ss.x.shape)
        x_row, x_col, x_ok = self._vn_index(x_spec, j, ss.x)
        targets = psum_targets(sa, ss, es.df, rows)
        targets = PsumTarget(targets.m, targets.n, s_ok[None, :, :] & x_ok[:, None, :])
        banks = output_banks(targets, o_spec, self.geom)
        if self.check:
            v = check_stream_read_legality(ss, x_spec, self.geom, s_ok.any(axis=0))
            if not v:
                raise LegalityViolation(f"streaming read {v.reason} at {v.where}")
            v = check_output_legality(targets, o_spec, self.geom, cfg, banks)
            if not v:
                raise LegalityViolation(f"output write {v.reason} at {v.where}")
        L, e, ok = banks
        if (targets.live & ~ok).any():
            raise LegalityViolation("psum target outside the output layout")
        hit = _TileAddressing(
            s_idx=(s_row, s_col), s_ok=s_ok[..., None], x_idx=(x_row, x_col), x_ok=x_ok[..., None],
            out_idx=((o_spec.base + L[ok] // cfg.aw) * o_spec.vn_size + e[ok], L[ok] % cfg.aw),
            live=ok,
        )
        self._tiles[key] = hit
        return hit

    def _execute(self, es) -> None:
        st, cfg = self.state, self.cfg
        em = st.em
        if em is None:
            raise MissingMapping("ExecuteStreaming before any ExecuteMapping")
        wos = Dataflow(es.df) == Dataflow.WOS
        s_op, x_op = (Operand.W, Operand.I) if wos else (Operand.I, Operand.W)
        s_spec, x_spec, o_spec = self._layout(s_op), self._layout(x_op), self._layout(Operand.O)
        vn = es.vn_size
        if s_spec.vn_size != vn or x_spec.vn_size != vn:
            raise LegalityViolation("VN size of ExecuteStreaming differs from the operand layouts")
        if vn > cfg.ah:
            raise LegalityViolation("VN size exceeds the array height")
        a = self._addressing(em, es, s_spec, x_spec, o_spec)
        s_vals = np.where(a.s_ok, st.images[Buffer.STATIONARY][a.s_idx], 0)
        x_vals = np.where(a.x_ok, st.images[Buffer.STREAMING][a.x_idx], 0)
        psum = np.einsum("hwe,twe->thw", s_vals, x_vals)
        out = st.images[Buffer.OUTPUT]
        np.add.at(out, a.out_idx, psum[a.live])
        touched = out[a.out_idx]
        if touched.size and (touched.max() > ACC_MAX or touched.min() < ACC_MIN):
            raise AccumulatorOverflow("output accumulator overflow")


def run_functional(trace: Trace, cfg: ArchConfig, offchip: dict, check_legality: bool = True) -> dict:
    return FunctionalSimulator(cfg, offchip, check_legality).run(trace)


def execute_trace(trace: Trace, cfg: ArchConfig, offchip: dict,
                  functional: bool = True) -> tuple[SimReport, dict]:
    """Run the functional pass (optional for huge traces) and the timing pass."""
    result = run_functional(trace, cfg, offchip) if functional else dict(offchip)
    report = schedule(trace, cfg)
    return report, result


__all__ = [
    "AccumulatorOverflow", "FunctionalSimulator", "LegalityViolation", "MachineState",
    "MissingTensor", "SimulationError", "execute_trace", "reference_gemm", "run_functional",
    "schedule", "tensor_id", "tile_cycles",
]
