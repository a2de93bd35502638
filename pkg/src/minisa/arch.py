"""FEATHER+ instance parameters and derived buffer geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

MB = 1_000_000

# (AH) -> (streaming/stationary bytes each, output bytes, instruction bytes)
EVAL_CAPACITIES = {
    4: (1.6 * MB, 0.8 * MB, 0.5 * MB),
    8: (6.4 * MB, 3.2 * MB, 1.0 * MB),
    16: (25.6 * MB, 12.8 * MB, 2.0 * MB),
}

# (AH, AW) pairs swept in the evaluation
EVAL_CONFIGS = [
    (4, 4), (4, 16), (4, 64),
    (8, 8), (8, 32), (8, 128),
    (16, 16), (16, 64), (16, 256),
]


class ConfigError(ValueError):
    pass


class NonPowerOfTwoAW(ConfigError):
    pass


class ZeroCapacity(ConfigError):
    pass


class AhExceedsDepth(ConfigError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    ah: int
    aw: int
    cap_str: int
    cap_sta: int
    cap_out: int
    cap_instr: int
    elem_bytes: int = 1
    acc_bytes: int = 4
    bw_operand: int | None = None
    bw_output: int | None = None
    bw_instr: int = 9

    @property
    def name(self) -> str:
        return f"{self.ah}x{self.aw}"


@dataclass(frozen=True)
class BufferGeometry:
    aw: int
    d_str: int
    d_sta: int
    d_out: int

    def depth(self, buffer: str) -> int:
        return {"streaming": self.d_str, "stationary": self.d_sta, "output": self.d_out}[buffer]

    def vn_slots(self, vn_size: int, buffer: str = "stationary") -> int:
        return (self.depth(buffer) // vn_size) * self.aw


def _is_pow2(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


def validate_config(raw: ArchConfig) -> ArchConfig:
    """Check invariants and fill in bandwidth defaults."""
    if raw.ah < 1:
        raise ConfigError(f"ah must be >= 1, got {raw.ah}")
    if raw.aw < 2 or not _is_pow2(raw.aw):
        raise NonPowerOfTwoAW(f"aw must be a power of two >= 2, got {raw.aw}")
    for name in ("cap_str", "cap_sta", "cap_out", "cap_instr"):
        if getattr(raw, name) <= 0:
            raise ZeroCapacity(f"{name} must be positive")
    if raw.elem_bytes not in (1, 2):
        raise ConfigError(f"elem_bytes must be 1 or 2, got {raw.elem_bytes}")
    if raw.acc_bytes < raw.elem_bytes:
        raise ConfigError("acc_bytes must be >= elem_bytes")
    if raw.bw_instr <= 0:
        raise ConfigError("bw_instr must be positive")
    cfg = replace(
        raw,
        cap_str=int(raw.cap_str),
        cap_sta=int(raw.cap_sta),
        cap_out=int(raw.cap_out),
        cap_instr=int(raw.cap_instr),
        bw_operand=raw.bw_operand or raw.aw,
        bw_output=raw.bw_output or 4 * raw.aw,
    )
    geom = buffer_geometry(cfg)
    for buf in ("streaming", "stationary", "output"):
        if geom.depth(buf) < cfg.ah:
            raise AhExceedsDepth(f"{buf} buffer depth {geom.depth(buf)} < ah={cfg.ah}: no VN fits")
    return cfg


def buffer_geometry(cfg: ArchConfig) -> BufferGeometry:
    row = cfg.aw * cfg.elem_bytes
    return BufferGeometry(
        aw=cfg.aw,
        d_str=cfg.cap_str // row,
        d_sta=cfg.cap_sta // row,
        d_out=cfg.cap_out // (cfg.aw * cfg.acc_bytes),
    )


def eval_config(ah: int, aw: int) -> ArchConfig:
    """Evaluation-scale instance: capacities per AH, read as per-buffer sizes."""
    data, out, instr = EVAL_CAPACITIES[ah]
    return validate_config(ArchConfig(ah, aw, int(data), int(data), int(out), int(instr)))


def small_config(ah: int, aw: int, depth: int = 64, cap_instr: int = 64 * 1024) -> ArchConfig:
    """Test-scale instance where every buffer is `depth` rows deep."""
    return validate_config(
        ArchConfig(ah, aw, depth * aw, depth * aw, depth * aw * 4, cap_instr)
    )


def clog2(x: int) -> int:
    """Bits needed to represent values in [0, x)."""
    return max(0, math.ceil(math.log2(x))) if x > 1 else 0


_INT_KEYS = {f.name for f in fields(ArchConfig)}
_ALIASES = {
    "cap_str_bytes": "cap_str",
    "cap_sta_bytes": "cap_sta",
    "cap_out_bytes": "cap_out",
    "cap_instr_bytes": "cap_instr",
}


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_text(text: str) -> ArchConfig:
    kv = parse_kv(text)
    args = {}
    for key, value in kv.items():
        name = _ALIASES.get(key, key)
        if name not in _INT_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        args[name] = int(float(value))
    try:
        return validate_config(ArchConfig(**args))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ArchConfig:
    return config_from_text(Path(path).read_text())


def config_to_text(cfg: ArchConfig) -> str:
    names = {v: k for k, v in _ALIASES.items()}
    lines = []
    for f in fields(ArchConfig):
        value = getattr(cfg, f.name)
        if value is not None:
            lines.append(f"{names.get(f.name, f.name)} = {value}")
    return "\n".join(lines) + "\n"
