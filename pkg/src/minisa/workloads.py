"""Benchmark GEMM suite, workload CSV I/O, im2col lowering and baseline ingestion."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class WorkloadError(ValueError):
    pass


class MissingColumn(WorkloadError):
    pass


class BadRow(WorkloadError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class NonPositiveOutput(WorkloadError):
    pass


@dataclass(frozen=True)
class Workload:
    """One GEMM ``O[M,N] = I[M,K] @ W[K,N]``."""

    category: str
    name: str
    m: int
    k: int
    n: int

    def __post_init__(self) -> None:
        if min(self.m, self.k, self.n) < 1:
            raise WorkloadError(f"{self.name}: dims must be >= 1, got {(self.m, self.k, self.n)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.m, self.k, self.n

    @property
    def macs(self) -> int:
        return self.m * self.k * self.n


WORKLOAD_COLUMNS = ("category", "name", "M", "K", "N")

# BConv (K, N) grid: 9 K values x 5 N values, first 41 pairs in (K, N) order
BCONV_K = (28, 30, 34, 38, 40, 44, 50, 54, 60)
BCONV_N = (72, 88, 110, 136, 160)
BCONV_M = 65536
BCONV_COUNT = 41
SUITE_SIZE = 50


def _bconv_all() -> list[Workload]:
    pairs = [(k, n) for k in BCONV_K for n in BCONV_N][:BCONV_COUNT]
    return [Workload("bconv", f"bconv_k{k}_n{n}", BCONV_M, k, n) for k, n in pairs]


def _fhe() -> list[Workload]:
    pts = [(1024, 64), (2048, 64), (2048, 128), (4096, 64), (4096, 128), (4096, 256)]
    return [Workload("fhe_ntt", f"fhe_ntt_{kn}_{m}", m, kn, kn) for kn, m in pts]


def _zkp() -> list[Workload]:
    out = []
    for kn in (8192, 16384, 32768):
        for m in (kn // 32, kn // 16):
            out.append(Workload("zkp_ntt", f"zkp_ntt_{kn}_{m}", m, kn, kn))
    return out


def _gpt() -> list[Workload]:
    pts = [("attn_qk", 64, 2048), ("qkv_proj", 2880, 4096), ("mlp_up", 2880, 5120),
           ("lm_head", 2880, 201088), ("out_proj", 4096, 2880)]
    return [Workload("gpt_oss", f"gpt_{nm}", 2048, k, n) for nm, k, n in pts]


def full_suite() -> list[Workload]:
    """All enumerated shapes before trimming (58 rows)."""
    return _bconv_all() + _fhe() + _zkp() + _gpt()


def builtin_suite() -> list[Workload]:
    """The 50-workload suite: drop the largest-N BConv rows until 50 remain."""
    rows = full_suite()
    excess = len(rows) - SUITE_SIZE
    bconv = [w for w in rows if w.category == "bconv"]
    drop = set(sorted(bconv, key=lambda w: (-w.n, -w.k))[:excess])
    return [w for w in rows if w not in drop]


def to_csv(workloads) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(WORKLOAD_COLUMNS)
    for w in workloads:
        wr.writerow((w.category, w.name, w.m, w.k, w.n))
    return buf.getvalue()


def _positive(text: str, line: int, col: str) -> int:
    try:
        v = int(text)
    except (TypeError, ValueError):
        raise BadRow(line, f"{col}={text!r} is not an integer") from None
    if v < 1:
        raise BadRow(line, f"{col}={v} must be positive")
    return v


def parse_csv(text: str) -> list[Workload]:
    rd = csv.DictReader(io.StringIO(text))
    missing = [c for c in WORKLOAD_COLUMNS if c not in (rd.fieldnames or ())]
    if missing:
        raise MissingColumn(f"workload CSV lacks columns {missing}")
    out = []
    for row in rd:
        line = rd.line_num
        dims = [_positive(row[c], line, c) for c in ("M", "K", "N")]
        out.append(Workload(row["category"], row["name"], *dims))
    return out


def load_csv(path) -> list[Workload]:
    return parse_csv(Path(path).read_text())


def load_baseline_csv(path) -> dict[str, float]:
    """``name,device,latency_us`` rows -> {name: latency_us}."""
    rd = csv.DictReader(io.StringIO(Path(path).read_text()))
    missing = [c for c in ("name", "device", "latency_us") if c not in (rd.fieldnames or ())]
    if missing:
        raise MissingColumn(f"baseline CSV lacks columns {missing}")
    out = {}
    for row in rd:
        try:
            lat = float(row["latency_us"])
        except (TypeError, ValueError):
            raise BadRow(rd.line_num, f"latency_us={row['latency_us']!r} is not a number") from None
        if not lat > 0:
            raise BadRow(rd.line_num, "latency_us must be positive")
        out[row["name"]] = lat
    return out


# --------------------------------------------------------------------------
# convolution lowering

@dataclass(frozen=True)
class ConvShape:
    batch: int
    in_ch: int
    out_ch: int
    height: int
    width: int
    kh: int
    kw: int
    stride: int = 1
    pad: int = 0

    @property
    def out_hw(self) -> tuple[int, int]:
        oh = (self.height + 2 * self.pad - self.kh) // self.stride + 1
        ow = (self.width + 2 * self.pad - self.kw) // self.stride + 1
        return oh, ow


def im2col(conv: ConvShape, name: str = "conv") -> tuple[Workload, np.ndarray]:
    """GEMM shape plus index map.

    The map has shape (M, K, 4) holding (b, c, y, x) of the input element
    feeding row m, column k; padded positions carry y or x out of range.
    Column order is (c, dy, dx), matching ``weight.reshape(out_ch, -1).T``.
    """
    oh, ow = conv.out_hw
    if oh < 1 or ow < 1:
        raise NonPositiveOutput(f"convolution output {oh}x{ow} is empty")
    b, oy, ox = np.meshgrid(np.arange(conv.batch), np.arange(oh), np.arange(ow), indexing="ij")
    c, dy, dx = np.meshgrid(np.arange(conv.in_ch), np.arange(conv.kh), np.arange(conv.kw), indexing="ij")
    b, oy, ox = b.reshape(-1, 1), oy.reshape(-1, 1), ox.reshape(-1, 1)
    c, dy, dx = c.reshape(1, -1), dy.reshape(1, -1), dx.reshape(1, -1)
    y = oy * conv.stride - conv.pad + dy
    x = ox * conv.stride - conv.pad + dx
    idx = np.stack(np.broadcast_arrays(b, c, y, x), axis=-1)
    wl = Workload("conv", name, conv.batch * oh * ow, conv.in_ch * conv.kh * conv.kw, conv.out_ch)
    return wl, idx


def im2col_input(image: np.ndarray, conv: ConvShape) -> np.ndarray:
    """Materialize the (M, K) input matrix from an NCHW image."""
    _, idx = im2col(conv)
    b, c, y, x = (idx[..., i] for i in range(4))
    ok = (y >= 0) & (y < conv.height) & (x >= 0) & (x < conv.width)
    vals = image[b, c, np.clip(y, 0, conv.height - 1), np.clip(x, 0, conv.width - 1)]
    return np.where(ok, vals, 0)


def conv_weight_matrix(weight: np.ndarray) -> np.ndarray:
    """(out_ch, in_ch, kh, kw) -> (K, N)."""
    return weight.reshape(weight.shape[0], -1).T
