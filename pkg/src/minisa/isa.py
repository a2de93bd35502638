"""MINISA instruction records, bit-accurate encoding and trace containers.

Every instruction word starts with a 3-bit opcode followed by its fields in
declaration order, each big-endian. Count-like fields are stored as
``value - 1``. Field widths are derived from the buffer geometry of the
target :class:`ArchConfig`, so the same instruction can have different
widths on different instances.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from typing import Iterator, Union

from .arch import ArchConfig, buffer_geometry, clog2, config_from_text, config_to_text

OPCODE_BITS = 3
ORIGIN_BITS = 32
TENSOR_BITS = 8


class Operand(IntEnum):
    I = 0
    W = 1
    O = 2


class Buffer(IntEnum):
    STREAMING = 0
    STATIONARY = 1
    OUTPUT = 2

    @property
    def key(self) -> str:
        return self.name.lower()


class Dataflow(IntEnum):
    IOS = 0
    WOS = 1


class ActFunc(IntEnum):
    IDENTITY = 0
    RELU = 1


class Commit(IntEnum):
    NONE = 0
    STREAMING = 1
    STATIONARY = 2


class IsaError(ValueError):
    pass


class FieldOutOfRange(IsaError):
    def __init__(self, field_name: str, value: int, lo: int, hi: int):
        super().__init__(f"{field_name}={value} outside [{lo}, {hi}]")
        self.field_name = field_name


class UnknownOpcode(IsaError):
    pass


class TruncatedBits(IsaError):
    pass


class InvalidTrace(IsaError):
    pass


# --------------------------------------------------------------------------
# parameter records

@dataclass(frozen=True)
class LayoutSpec:
    """VN layout of one operand: two-level partition, rank order, placement.

    ``base`` is the first VN slot row of the region the layout occupies.
    """

    operand: Operand
    vn_size: int
    f_red_l1: int
    f_nr_l0: int
    f_nr_l1: int
    order_id: int
    base: int = 0

    @property
    def num_vns(self) -> int:
        return self.f_red_l1 * self.f_nr_l0 * self.f_nr_l1


@dataclass(frozen=True)
class MappingEM:
    r0: int
    c0: int
    g_r: int
    g_c: int
    s_r: int
    s_c: int


@dataclass(frozen=True)
class MappingES:
    m0: int
    s_m: int
    t: int
    vn_size: int
    df: Dataflow


@dataclass(frozen=True)
class TransferDesc:
    buffer: Buffer
    operand: Operand
    tensor: int
    row_start: int
    row_count: int
    origin_row: int = 0
    origin_col: int = 0
    ext_rows: int = 1
    ext_cols: int = 1


@dataclass(frozen=True)
class ActDesc:
    buffer: Buffer
    func: ActFunc
    row_start: int
    row_count: int


# --------------------------------------------------------------------------
# the eight instructions

@dataclass(frozen=True)
class SetIVNLayout:
    layout: LayoutSpec


@dataclass(frozen=True)
class SetWVNLayout:
    layout: LayoutSpec


@dataclass(frozen=True)
class SetOVNLayout:
    """Clear the output region; optionally first commit the finished tile."""

    layout: LayoutSpec
    commit: Commit = Commit.NONE


@dataclass(frozen=True)
class ExecuteMapping:
    em: MappingEM


@dataclass(frozen=True)
class ExecuteStreaming:
    es: MappingES


@dataclass(frozen=True)
class Load:
    xfer: TransferDesc


@dataclass(frozen=True)
class Write:
    xfer: TransferDesc


@dataclass(frozen=True)
class Activation:
    act: ActDesc


Instruction = Union[
    SetIVNLayout, SetWVNLayout, SetOVNLayout, ExecuteMapping,
    ExecuteStreaming, Load, Write, Activation,
]

OPCODES: dict[type, int] = {
    SetIVNLayout: 0,
    SetWVNLayout: 1,
    SetOVNLayout: 2,
    ExecuteMapping: 3,
    ExecuteStreaming: 4,
    Load: 5,
    Write: 6,
    Activation: 7,
}
KINDS = {v: k for k, v in OPCODES.items()}
LAYOUT_KINDS = {SetIVNLayout: Operand.I, SetWVNLayout: Operand.W, SetOVNLayout: Operand.O}


# --------------------------------------------------------------------------
# field tables

@dataclass(frozen=True)
class Field:
    path: str      # dotted attribute path inside the instruction
    bits: int
    lo: int        # smallest legal value (subtracted before packing)
    hi: int        # largest legal value

    @property
    def name(self) -> str:
        return self.path.rsplit(".", 1)[-1]


@dataclass(frozen=True)
class Bounds:
    """Architectural limits that size every instruction field."""

    ah: int
    aw: int
    depth: int          # deepest buffer, rows
    stream_rows: int    # VN slot rows per column of an operand buffer
    em_slots: int       # operand-buffer VN capacity at vn_size = ah
    layout_slots: int   # any-buffer VN capacity at vn_size = 1

    @classmethod
    def of(cls, cfg: ArchConfig) -> "Bounds":
        g = buffer_geometry(cfg)
        d_op = max(g.d_str, g.d_sta)
        return cls(
            ah=cfg.ah,
            aw=cfg.aw,
            depth=max(g.d_str, g.d_sta, g.d_out),
            stream_rows=max(1, d_op // cfg.ah),
            em_slots=max(1, (d_op // cfg.ah) * cfg.aw),
            layout_slots=max(g.d_str, g.d_sta, g.d_out) * cfg.aw,
        )


def _count(path: str, hi: int) -> Field:
    return Field(path, clog2(hi), 1, hi)


def _index(path: str, n: int) -> Field:
    return Field(path, clog2(n), 0, n - 1)


def _enum(path: str, n: int, bits: int) -> Field:
    return Field(path, bits, 0, n - 1)


def _layout_fields(b: Bounds) -> list[Field]:
    return [
        _count("layout.vn_size", b.ah),
        _count("layout.f_red_l1", b.layout_slots),
        _count("layout.f_nr_l0", b.aw),
        _count("layout.f_nr_l1", b.layout_slots),
        _enum("layout.order_id", 6, 3),
        _index("layout.base", b.depth),
    ]


def _xfer_fields(b: Bounds) -> list[Field]:
    return [
        _enum("xfer.buffer", 3, 2),
        _enum("xfer.operand", 3, 2),
        _index("xfer.tensor", 1 << TENSOR_BITS),
        _index("xfer.row_start", b.depth),
        _count("xfer.row_count", b.depth),
        _index("xfer.origin_row", 1 << ORIGIN_BITS),
        _index("xfer.origin_col", 1 << ORIGIN_BITS),
        _count("xfer.ext_rows", 1 << ORIGIN_BITS),
        _count("xfer.ext_cols", 1 << ORIGIN_BITS),
    ]


@lru_cache(maxsize=None)
def _fields_for(kind: type, b: Bounds) -> tuple[Field, ...]:
    if kind in (SetIVNLayout, SetWVNLayout):
        fs = _layout_fields(b)
    elif kind is SetOVNLayout:
        fs = _layout_fields(b) + [_enum("commit", 3, 2)]
    elif kind is ExecuteMapping:
        half = b.em_slots // 2
        fs = [
            _index("em.r0", b.em_slots),
            _index("em.c0", b.em_slots),
            _count("em.g_r", b.aw),
            _count("em.g_c", b.aw),
            Field("em.s_r", clog2(half + 1), 0, half),
            Field("em.s_c", clog2(half + 1), 0, half),
        ]
    elif kind is ExecuteStreaming:
        fs = [
            _index("es.m0", b.stream_rows),
            _count("es.s_m", b.stream_rows),
            _count("es.t", b.stream_rows),
            _count("es.vn_size", b.ah),
            _enum("es.df", 2, 1),
        ]
    elif kind in (Load, Write):
        fs = _xfer_fields(b)
    elif kind is Activation:
        fs = [
            _enum("act.buffer", 3, 2),
            _enum("act.func", 2, 1),
            _index("act.row_start", b.depth),
            _count("act.row_count", b.depth),
        ]
    else:
        raise UnknownOpcode(f"not a MINISA instruction kind: {kind!r}")
    return tuple(fs)


def instruction_fields(kind: type, cfg: ArchConfig) -> tuple[Field, ...]:
    return _fields_for(kind, Bounds.of(cfg))


@lru_cache(maxsize=None)
def _width(kind: type, b: Bounds) -> int:
    return OPCODE_BITS + sum(f.bits for f in _fields_for(kind, b))


def instruction_bit_width(kind: type, cfg: ArchConfig) -> int:
    return _width(kind, Bounds.of(cfg))


def instruction_bytes(kind: type, cfg: ArchConfig) -> int:
    return (instruction_bit_width(kind, cfg) + 7) // 8


# --------------------------------------------------------------------------
# encode / decode

def _get(obj, path: str):
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def set_path(obj, path: str, value):
    """Return a copy of a frozen dataclass tree with ``path`` replaced."""
    head, _, rest = path.partition(".")
    if not rest:
        return dataclasses.replace(obj, **{head: value})
    return dataclasses.replace(obj, **{head: set_path(getattr(obj, head), rest, value)})


def check_fields(instr: Instruction, cfg: ArchConfig) -> None:
    for f in instruction_fields(type(instr), cfg):
        value = int(_get(instr, f.path))
        if not f.lo <= value <= f.hi:
            raise FieldOutOfRange(f.name, value, f.lo, f.hi)
    if isinstance(instr, (SetIVNLayout, SetWVNLayout, SetOVNLayout)):
        if instr.layout.operand != LAYOUT_KINDS[type(instr)]:
            raise FieldOutOfRange("operand", int(instr.layout.operand), 0, 2)


def encode(instr: Instruction, cfg: ArchConfig) -> str:
    """Pack one instruction into a '0'/'1' string of its exact bit width."""
    kind = type(instr)
    if kind not in OPCODES:
        raise UnknownOpcode(f"cannot encode {kind!r}")
    check_fields(instr, cfg)
    parts = [format(OPCODES[kind], f"0{OPCODE_BITS}b")]
    for f in instruction_fields(kind, cfg):
        if f.bits:
            parts.append(format(int(_get(instr, f.path)) - f.lo, f"0{f.bits}b"))
    return "".join(parts)


_ENUM_FIELDS = {
    "df": Dataflow, "buffer": Buffer, "operand": Operand, "func": ActFunc, "commit": Commit,
}
_PAYLOAD = {
    SetIVNLayout: ("layout", LayoutSpec),
    SetWVNLayout: ("layout", LayoutSpec),
    SetOVNLayout: ("layout", LayoutSpec),
    ExecuteMapping: ("em", MappingEM),
    ExecuteStreaming: ("es", MappingES),
    Load: ("xfer", TransferDesc),
    Write: ("xfer", TransferDesc),
    Activation: ("act", ActDesc),
}


def decode(bits: str, cfg: ArchConfig) -> Instruction:
    if len(bits) < OPCODE_BITS:
        raise TruncatedBits(f"need {OPCODE_BITS} opcode bits, got {len(bits)}")
    if set(bits) - {"0", "1"}:
        raise IsaError("bit string may contain only '0' and '1'")
    opcode = int(bits[:OPCODE_BITS], 2)
    kind = KINDS.get(opcode)
    if kind is None:
        raise UnknownOpcode(f"opcode {opcode}")
    width = instruction_bit_width(kind, cfg)
    if len(bits) != width:
        raise TruncatedBits(f"{kind.__name__} needs {width} bits, got {len(bits)}")
    pos = OPCODE_BITS
    payload: dict[str, int] = {}
    top: dict[str, int] = {}
    for f in instruction_fields(kind, cfg):
        raw = int(bits[pos:pos + f.bits], 2) if f.bits else 0
        pos += f.bits
        value = raw + f.lo
        name = f.name
        if name in _ENUM_FIELDS:
            value = _ENUM_FIELDS[name](value)
        if "." in f.path:
            payload[name] = value
        else:
            top[name] = value
    attr, record = _PAYLOAD[kind]
    if kind in LAYOUT_KINDS:
        payload["operand"] = LAYOUT_KINDS[kind]
    return kind(**{attr: record(**payload)}, **top)


# --------------------------------------------------------------------------
# traces

@dataclass(frozen=True)
class Vary:
    """Per-iteration change of one field inside a loop body.

    Iteration ``i`` sees ``value + i * inc + cycle[i % len(cycle)]``.
    ``path`` indexes into nested loop bodies.
    """

    path: tuple[int, ...]
    field: str
    inc: int = 0
    cycle: tuple[int, ...] = ()

    def offset(self, i: int) -> int:
        return i * self.inc + (self.cycle[i % len(self.cycle)] if self.cycle else 0)


@dataclass(frozen=True)
class Loop:
    body: tuple
    count: int
    vary: tuple[Vary, ...] = ()

    @property
    def period(self) -> int:
        return math.lcm(1, *(len(v.cycle) for v in self.vary if v.cycle))

    def iteration(self, i: int) -> tuple:
        body = list(self.body)
        for v in self.vary:
            delta = v.offset(i)
            if delta:
                body[v.path[0]] = _shift(body[v.path[0]], v.path[1:], v.field, delta)
        return tuple(body)


def _shift(item, subpath: tuple[int, ...], fieldname: str, delta: int):
    if not subpath:
        return set_path(item, fieldname, _get(item, fieldname) + delta)
    body = list(item.body)
    body[subpath[0]] = _shift(body[subpath[0]], subpath[1:], fieldname, delta)
    return dataclasses.replace(item, body=tuple(body))


TraceItem = Union[Instruction, Loop]


@dataclass(frozen=True)
class Trace:
    items: tuple = ()

    def __iter__(self) -> Iterator[Instruction]:
        return flatten(self.items)

    def __len__(self) -> int:
        return count_instructions(self.items)

    @classmethod
    def of(cls, instrs) -> "Trace":
        return cls(tuple(instrs))

    def expanded(self) -> "Trace":
        return Trace(tuple(self))


def flatten(items) -> Iterator[Instruction]:
    for item in items:
        if isinstance(item, Loop):
            for i in range(item.count):
                yield from flatten(item.iteration(i))
        else:
            yield item


def count_instructions(items) -> int:
    n = 0
    for item in items:
        n += item.count * count_instructions(item.body) if isinstance(item, Loop) else 1
    return n


def count_kinds(items) -> dict[type, int]:
    out: dict[type, int] = {}
    for item in items:
        if isinstance(item, Loop):
            for k, v in count_kinds(item.body).items():
                out[k] = out.get(k, 0) + item.count * v
        else:
            out[type(item)] = out.get(type(item), 0) + 1
    return out


def trace_bytes(trace: Trace, cfg: ArchConfig) -> int:
    """Total instruction bytes, each instruction rounded up to whole bytes."""
    for instr in _distinct_instructions(trace.items):
        check_fields(instr, cfg)
    return sum(n * instruction_bytes(k, cfg) for k, n in count_kinds(trace.items).items())


def _distinct_instructions(items) -> Iterator[Instruction]:
    # first and last iteration of each loop bound every varied field
    for item in items:
        if isinstance(item, Loop):
            yield from _distinct_instructions(item.iteration(0))
            if item.count > 1:
                yield from _distinct_instructions(item.iteration(item.count - 1))
        else:
            yield item


def check_trace(trace: Trace) -> None:
    """Reject a trace whose first ExecuteStreaming has no ExecuteMapping before it."""
    if _scan(trace.items, False) is None:
        raise InvalidTrace("ExecuteStreaming before any ExecuteMapping")


def _scan(items, seen: bool):
    for item in items:
        if isinstance(item, Loop):
            if item.count == 0:
                continue
            seen = _scan(item.body, seen)
            if seen is None:
                return None
        elif isinstance(item, ExecuteMapping):
            seen = True
        elif isinstance(item, ExecuteStreaming) and not seen:
            return None
    return seen


# --------------------------------------------------------------------------
# binary container

MAGIC = b"MINISA\x00\x01"
_LOOP_MARK = 0xFFFF


def _bits_to_bytes(bits: str) -> bytes:
    pad = (-len(bits)) % 8
    value = int(bits + "0" * pad, 2) if bits else 0
    return value.to_bytes((len(bits) + pad) // 8, "big")


def _bytes_to_bits(data: bytes, nbits: int) -> str:
    return format(int.from_bytes(data, "big"), f"0{len(data) * 8}b")[:nbits]


def dump_trace(trace: Trace, cfg: ArchConfig) -> bytes:
    header = config_to_text(cfg).encode()
    out = bytearray(MAGIC)
    out += struct.pack(">I", len(header)) + header
    _dump_items(trace.items, cfg, out)
    return bytes(out)


def _dump_items(items, cfg, out: bytearray) -> None:
    out += struct.pack(">I", len(items))
    for item in items:
        if isinstance(item, Loop):
            out += struct.pack(">HII", _LOOP_MARK, item.count, len(item.vary))
            for v in item.vary:
                name = v.field.encode()
                out += struct.pack(">B", len(v.path)) + bytes(v.path)
                out += struct.pack(">B", len(name)) + name
                out += struct.pack(">qH", v.inc, len(v.cycle))
                out += b"".join(struct.pack(">q", c) for c in v.cycle)
            _dump_items(item.body, cfg, out)
        else:
            bits = encode(item, cfg)
            out += struct.pack(">H", len(bits)) + _bits_to_bytes(bits)


def load_trace(data: bytes) -> tuple[Trace, ArchConfig]:
    if data[:8] != MAGIC:
        raise IsaError("bad trace magic")
    (hlen,) = struct.unpack_from(">I", data, 8)
    cfg = config_from_text(data[12:12 + hlen].decode())
    items, _ = _load_items(data, 12 + hlen, cfg)
    return Trace(items), cfg


def _load_items(data: bytes, pos: int, cfg) -> tuple[tuple, int]:
    (n,) = struct.unpack_from(">I", data, pos)
    pos += 4
    items = []
    for _ in range(n):
        (mark,) = struct.unpack_from(">H", data, pos)
        if mark == _LOOP_MARK:
            count, nvary = struct.unpack_from(">II", data, pos + 2)
            pos += 10
            vary = []
            for _ in range(nvary):
                plen = data[pos]
                path = tuple(data[pos + 1:pos + 1 + plen])
                pos += 1 + plen
                nlen = data[pos]
                name = data[pos + 1:pos + 1 + nlen].decode()
                pos += 1 + nlen
                inc, ncyc = struct.unpack_from(">qH", data, pos)
                pos += 10
                cycle = struct.unpack_from(f">{ncyc}q", data, pos)
                pos += 8 * ncyc
                vary.append(Vary(path, name, inc, tuple(cycle)))
            body, pos = _load_items(data, pos, cfg)
            items.append(Loop(body, count, tuple(vary)))
        else:
            nbytes = (mark + 7) // 8
            chunk = data[pos + 2:pos + 2 + nbytes]
            if len(chunk) < nbytes:
                raise TruncatedBits("record runs past end of trace")
            items.append(decode(_bytes_to_bits(chunk, mark), cfg))
            pos += 2 + nbytes
    return tuple(items), pos


# --------------------------------------------------------------------------
# text disassembly

def _fmt(instr: Instruction) -> str:
    attr, _ = _PAYLOAD[type(instr)]
    rec = getattr(instr, attr)
    parts = [type(instr).__name__]
    for f in dataclasses.fields(rec):
        value = getattr(rec, f.name)
        parts.append(f"{f.name}={value.name if isinstance(value, IntEnum) else value}")
    if isinstance(instr, SetOVNLayout):
        parts.append(f"commit={instr.commit.name}")
    return " ".join(parts)


def disassemble(trace: Trace) -> str:
    lines: list[str] = []
    _dis(trace.items, lines, 0)
    return "\n".join(lines) + ("\n" if lines else "")


def _dis(items, lines: list[str], depth: int) -> None:
    pad = "  " * depth
    for item in items:
        if isinstance(item, Loop):
            lines.append(f"{pad}LOOP count={item.count}")
            for v in item.vary:
                cyc = ",".join(map(str, v.cycle))
                lines.append(
                    f"{pad}  VARY path={'.'.join(map(str, v.path))} field={v.field}"
                    f" inc={v.inc} cycle={cyc}"
                )
            _dis(item.body, lines, depth + 1)
            lines.append(f"{pad}END")
        else:
            lines.append(pad + _fmt(item))


_BY_NAME = {k.__name__: k for k in OPCODES}


def _parse_instr(tokens: list[str]) -> Instruction:
    kind = _BY_NAME.get(tokens[0])
    if kind is None:
        raise UnknownOpcode(tokens[0])
    attr, record = _PAYLOAD[kind]
    kv = dict(t.split("=", 1) for t in tokens[1:])
    top = {}
    if "commit" in kv:
        top["commit"] = Commit[kv.pop("commit")]
    args = {}
    for f in dataclasses.fields(record):
        raw = kv[f.name]
        enum = _ENUM_FIELDS.get(f.name)
        args[f.name] = enum[raw] if enum else int(raw)
    return kind(**{attr: record(**args)}, **top)


def assemble(text: str) -> Trace:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    items, pos = _asm(lines, 0)
    if pos != len(lines):
        raise IsaError(f"unexpected END at line {pos + 1}")
    return Trace(items)


def _asm(lines: list[str], pos: int) -> tuple[tuple, int]:
    items = []
    while pos < len(lines):
        tokens = lines[pos].split()
        if tokens[0] == "END":
            return tuple(items), pos
        if tokens[0] == "LOOP":
            count = int(tokens[1].split("=")[1])
            pos += 1
            vary = []
            while lines[pos].startswith("VARY"):
                kv = dict(t.split("=", 1) for t in lines[pos].split()[1:])
                vary.append(Vary(
                    tuple(int(p) for p in kv["path"].split(".")),
                    kv["field"],
                    int(kv["inc"]),
                    tuple(int(c) for c in kv["cycle"].split(",") if c),
                ))
                pos += 1
            body, pos = _asm(lines, pos)
            items.append(Loop(body, count, tuple(vary)))
            pos += 1
        else:
            items.append(_parse_instr(tokens))
            pos += 1
    return tuple(items), pos

