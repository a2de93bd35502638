"""Five-engine overlapped latency model over (possibly loop-compressed) traces.

Engines: instruction fetch, load-in, compute, out->stream and store-out.
Each instruction is fetched in order at ``bw_instr`` bytes/cycle and then
starts on its engine once the engine is free, its fetch has completed and
the buffer regions it touches are ready. Layout and mapping instructions
only configure state; they complete as soon as they are fetched.

Loops are simulated iteration by iteration until the machine state advances
by the same per-iteration delta twice in a row; the remaining iterations
are then applied in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .arch import ArchConfig, buffer_geometry
from .isa import (
    Activation, Buffer, Commit, ExecuteMapping, ExecuteStreaming, Load, Loop, Operand,
    SetIVNLayout, SetOVNLayout, SetWVNLayout, Trace, Write, instruction_bytes,
)
from .layout import convert_operand, flatten_index, in_partition

FETCH, LOAD, COMPUTE, OUT2STREAM, STORE = range(5)
ENGINE_NAMES = ("instr_fetch", "load", "compute", "out2stream", "store")


def reduce_stages(aw: int) -> int:
    """Depth of the aw-wide reorder/reduction network."""
    return 2 * int(math.log2(aw))


def tile_cycles(em, es, cfg: ArchConfig) -> int:
    """Compute-engine cycles of one EM/ES pair (stationary fill excluded)."""
    return es.t * es.vn_size + es.vn_size + reduce_stages(cfg.aw)


@dataclass
class SimReport:
    total_cycles: int = 0
    busy: list = field(default_factory=lambda: [0] * 5)
    stall_cycles_instr: int = 0
    instruction_bytes: int = 0
    data_bytes_in: int = 0
    data_bytes_out: int = 0
    mac_count: int = 0
    compute_tiles: int = 0
    ah: int = 1
    aw: int = 1

    @property
    def utilization(self) -> float:
        if self.total_cycles == 0:
            return 0.0
        return self.mac_count / (self.ah * self.aw * self.total_cycles)

    @property
    def stall_fraction(self) -> float:
        return self.stall_cycles_instr / self.total_cycles if self.total_cycles else 0.0

    @property
    def data_bytes(self) -> int:
        return self.data_bytes_in + self.data_bytes_out

    def engine_cycles(self, name: str) -> int:
        return self.busy[ENGINE_NAMES.index(name)]

    def as_row(self) -> dict:
        return {
            "total_cycles": self.total_cycles,
            "cycles_compute": self.busy[COMPUTE],
            "cycles_load": self.busy[LOAD],
            "cycles_out2stream": self.busy[OUT2STREAM],
            "cycles_store": self.busy[STORE],
            "stall_instr": self.stall_cycles_instr,
            "instr_bytes": self.instruction_bytes,
            "data_bytes": self.data_bytes,
            "utilization": round(self.utilization, 6),
        }


# fetch-byte override: (instruction, compute duration or None) -> bytes
FetchCost = Callable[[object, "int | None"], int]


@dataclass
class _Region:
    ready: int = 0      # last writer done
    read_end: int = 0   # last reader done
    extent: tuple = (0, 0)  # (reduction, non-reduction) valid elements


class TimingEngine:
    def __init__(self, cfg: ArchConfig, fetch_cost: FetchCost | None = None):
        self.cfg = cfg
        self.geom = buffer_geometry(cfg)
        self.fetch_cost = fetch_cost
        self.fetch_done = 0
        self.free = [0] * 5
        self.end = 0
        self.regions: dict[tuple, _Region] = {}
        self.layouts: dict[Operand, object] = {}
        self.em = None
        self.first_compute = True
        self.rep = SimReport(ah=cfg.ah, aw=cfg.aw)
        self._bytes_cache: dict[type, int] = {}

    # ------------------------------------------------------------------ state
    def _region(self, key) -> _Region:
        reg = self.regions.get(key)
        if reg is None:
            reg = self.regions[key] = _Region()
        return reg

    def _snapshot(self):
        keys = sorted(self.regions)
        times = [self.fetch_done, self.end, *self.free]
        for k in keys:
            r = self.regions[k]
            times.append(r.ready)
            times.append(r.read_end)
        rep = self.rep
        stats = [rep.stall_cycles_instr, rep.instruction_bytes, rep.data_bytes_in,
                 rep.data_bytes_out, rep.mac_count, rep.compute_tiles, *rep.busy]
        shape = (tuple(keys), tuple((int(o), self.layouts[o]) for o in sorted(self.layouts)),
                 self.first_compute)
        return shape, np.array(times, dtype=np.int64), np.array(stats, dtype=np.int64)

    def _advance(self, n: int, dt: np.ndarray, ds: np.ndarray) -> None:
        self.fetch_done += n * int(dt[0])
        self.end += n * int(dt[1])
        for i in range(5):
            self.free[i] += n * int(dt[2 + i])
        pos = 7
        for k in sorted(self.regions):
            r = self.regions[k]
            r.ready += n * int(dt[pos])
            r.read_end += n * int(dt[pos + 1])
            pos += 2
        rep = self.rep
        rep.stall_cycles_instr += n * int(ds[0])
        rep.instruction_bytes += n * int(ds[1])
        rep.data_bytes_in += n * int(ds[2])
        rep.data_bytes_out += n * int(ds[3])
        rep.mac_count += n * int(ds[4])
        rep.compute_tiles += n * int(ds[5])
        for i in range(5):
            rep.busy[i] += n * int(ds[6 + i])

    # ------------------------------------------------------------------ run
    def run(self, items) -> SimReport:
        self._items(items)
        self.rep.total_cycles = self.end
        return self.rep

    def _items(self, items) -> None:
        for item in items:
            if isinstance(item, Loop):
                self._loop(item)
            else:
                self.step(item)

    def _loop(self, loop: Loop) -> None:
        period = loop.period
        history = []
        i = 0
        while i < loop.count:
            self._items(loop.iteration(i))
            i += 1
            if i % period:
                continue
            history.append(self._snapshot())
            if len(history) >= 3:
                (s0, t0, a0), (s1, t1, a1), (s2, t2, a2) = history[-3:]
                if s0 == s1 == s2:
                    dt, ds = t2 - t1, a2 - a1
                    if np.array_equal(dt, t1 - t0) and np.array_equal(ds, a1 - a0):
                        n = (loop.count - i) // period
                        if n:
                            self._advance(n, dt, ds)
                            i += n * period
                        history.clear()
                history = history[-3:]

    # ------------------------------------------------------------------ one instruction
    def _fetch(self, instr, duration=None) -> int:
        if self.fetch_cost is not None:
            nbytes = self.fetch_cost(instr, duration)
        else:
            kind = type(instr)
            nbytes = self._bytes_cache.get(kind)
            if nbytes is None:
                nbytes = self._bytes_cache[kind] = instruction_bytes(kind, self.cfg)
        cycles = -(-nbytes // self.cfg.bw_instr)
        self.fetch_done += cycles
        self.rep.instruction_bytes += nbytes
        self.rep.busy[FETCH] += cycles
        self.end = max(self.end, self.fetch_done)
        return self.fetch_done

    def _run_on(self, engine: int, ready: int, duration: int, fetched: int) -> tuple[int, int]:
        start = max(fetched, self.free[engine], ready)
        if engine == COMPUTE and fetched > max(self.free[engine], ready):
            self.rep.stall_cycles_instr += fetched - max(self.free[engine], ready)
        finish = start + duration
        self.free[engine] = finish
        self.rep.busy[engine] += duration
        self.end = max(self.end, finish)
        return start, finish

    def _layout_key(self, operand: Operand, buffer: Buffer):
        spec = self.layouts.get(operand)
        base = spec.base * spec.vn_size if spec is not None else 0
        return (int(buffer), base)

    def step(self, instr) -> None:
        cfg = self.cfg
        if isinstance(instr, (SetIVNLayout, SetWVNLayout)):
            self._fetch(instr)
            self.layouts[instr.layout.operand] = instr.layout
        elif isinstance(instr, ExecuteMapping):
            self._fetch(instr)
            self.em = instr.em
        elif isinstance(instr, SetOVNLayout):
            fetched = self._fetch(instr)
            old = self.layouts.get(Operand.O)
            new_key = (int(Buffer.OUTPUT), instr.layout.base * instr.layout.vn_size)
            new = self._region(new_key)
            ready = max(new.ready, new.read_end)
            duration = 0
            if instr.commit != Commit.NONE and old is not None:
                src = self._region((int(Buffer.OUTPUT), old.base * old.vn_size))
                dst_key = (int(Buffer.STREAMING if instr.commit == Commit.STREAMING else Buffer.STATIONARY),
                           old.base * old.vn_size)
                dst = self._region(dst_key)
                ready = max(ready, src.ready, dst.ready, dst.read_end)
                duration = -(-(old.num_vns * old.vn_size) // cfg.aw)
                _, finish = self._run_on(OUT2STREAM, ready, duration, fetched)
                src.read_end = max(src.read_end, finish)
                dst.ready = finish
                dst.extent = (old.f_red_l1 * old.vn_size, old.f_nr_l0 * old.f_nr_l1)
                self.layouts[Operand.I] = _as_input(old)
                new.ready = max(new.ready, finish)
            else:
                _, finish = self._run_on(OUT2STREAM, ready, 0, fetched)
                new.ready = finish
            self.layouts[Operand.O] = instr.layout
        elif isinstance(instr, ExecuteStreaming):
            self._compute(instr)
        elif isinstance(instr, Load):
            x = instr.xfer
            fetched = self._fetch(instr)
            nbytes = x.ext_rows * x.ext_cols * cfg.elem_bytes
            reg = self._region((int(x.buffer), x.row_start))
            _, finish = self._run_on(LOAD, max(reg.ready, reg.read_end), -(-nbytes // cfg.bw_operand), fetched)
            reg.ready = finish
            if x.operand == Operand.I:
                reg.extent = (x.ext_cols, x.ext_rows)
            elif x.operand == Operand.W:
                reg.extent = (x.ext_rows, x.ext_cols)
            else:
                reg.extent = (x.ext_cols, x.ext_rows)
            self.rep.data_bytes_in += nbytes
        elif isinstance(instr, Write):
            x = instr.xfer
            fetched = self._fetch(instr)
            width = cfg.acc_bytes if x.buffer == Buffer.OUTPUT else cfg.elem_bytes
            nbytes = x.ext_rows * x.ext_cols * width
            reg = self._region((int(x.buffer), x.row_start))
            _, finish = self._run_on(STORE, reg.ready, -(-nbytes // cfg.bw_output), fetched)
            reg.read_end = max(reg.read_end, finish)
            self.rep.data_bytes_out += nbytes
        elif isinstance(instr, Activation):
            a = instr.act
            fetched = self._fetch(instr)
            reg = self._region((int(a.buffer), a.row_start))
            _, finish = self._run_on(OUT2STREAM, max(reg.ready, reg.read_end), a.row_count, fetched)
            reg.ready = finish
        else:
            raise TypeError(f"not an instruction: {instr!r}")

    def _compute(self, instr: ExecuteStreaming) -> None:
        es = instr.es
        em = self.em
        if em is None:
            from .mapping import MissingMapping
            raise MissingMapping("ExecuteStreaming before any ExecuteMapping")
        s_op, x_op = (Operand.W, Operand.I) if es.df == 1 else (Operand.I, Operand.W)
        s_key = self._layout_key(s_op, Buffer.STATIONARY)
        x_key = self._layout_key(x_op, Buffer.STREAMING)
        o_key = self._layout_key(Operand.O, Buffer.OUTPUT)
        duration = tile_cycles(em, es, self.cfg)
        if self.first_compute:
            duration += self._fill_rows(em, es, s_op)
            self.first_compute = False
        fetched = self._fetch(instr, duration)
        s_reg, x_reg, o_reg = self._region(s_key), self._region(x_key), self._region(o_key)
        ready = max(s_reg.ready, x_reg.ready, o_reg.ready, o_reg.read_end)
        _, finish = self._run_on(COMPUTE, ready, duration, fetched)
        s_reg.read_end = max(s_reg.read_end, finish)
        x_reg.read_end = max(x_reg.read_end, finish)
        o_reg.ready = finish
        self.rep.compute_tiles += 1
        self.rep.mac_count += self._macs(em, es, s_op, x_op, s_reg.extent, x_reg.extent)

    def _fill_rows(self, em, es, s_op) -> int:
        """Physical stationary rows read to fill the PE registers."""
        spec = self.layouts.get(s_op)
        if spec is None:
            return 0
        aw = self.cfg.aw
        a_h = np.arange(es.vn_size)[:, None]
        a_w = np.arange(aw)[None, :]
        r = np.broadcast_to(em.r0 + a_w // em.g_r, (es.vn_size, aw))
        c = em.c0 + em.s_r * a_h + em.s_c * (a_w % em.g_c)
        ok = in_partition(spec, r, c)
        if not ok.any():
            return 0
        L = flatten_index(spec, r[ok], c[ok])
        return int(np.unique(L // aw).size) * spec.vn_size

    def _macs(self, em, es, s_op, x_op, s_ext, x_ext) -> int:
        s_spec = self.layouts.get(s_op)
        x_spec = self.layouts.get(x_op)
        if s_spec is None or x_spec is None:
            return 0
        aw, vn = self.cfg.aw, es.vn_size
        red_ext, c_ext = s_ext
        x_ext_n = x_ext[1]
        a_w = np.arange(aw)
        r = em.r0 + a_w // em.g_r
        k_valid = np.clip(red_ext - r * vn, 0, vn) * (r < s_spec.f_red_l1)
        c = em.c0 + em.s_r * np.arange(vn)[:, None] + em.s_c * (a_w % em.g_c)[None, :]
        c_lim = min(c_ext, s_spec.f_nr_l0 * s_spec.f_nr_l1)
        c_valid = ((c >= 0) & (c < c_lim)).sum(axis=0)
        off = (a_w % em.g_r) // em.g_c
        x_lim = min(x_ext_n, x_spec.f_nr_l0 * x_spec.f_nr_l1)
        steps = np.clip(-(-(x_lim - es.m0 - off) // es.s_m), 0, es.t)
        return int((k_valid * c_valid * steps).sum())


def _as_input(spec):
    return convert_operand(spec, Operand.I)


def schedule(trace: Trace, cfg: ArchConfig, fetch_cost: FetchCost | None = None) -> SimReport:
    """Timing of a trace; ``fetch_cost`` substitutes per-instruction fetch bytes."""
    return TimingEngine(cfg, fetch_cost).run(trace.items)
