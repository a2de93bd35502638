"""VN-granular placement of I, W and O tiles in the on-chip buffers.

A layout splits the non-reduction rank of an operand into two levels
(``f_nr_l0`` inner, ``f_nr_l1`` outer) and keeps the reduction rank at VN
granularity (``f_red_l1`` VN rows). The three resulting rank variables are
flattened in the order selected by ``order_id`` and the linear index is
placed row-major over the ``AW`` columns of the buffer. A VN occupies
``vn_size`` consecutive physical rows of one column.

Tensors cross this module boundary as (reduction x non-reduction) arrays:
W as K x N, I as the transpose of M x K, O as the transpose of M x N.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .arch import BufferGeometry
from .isa import LayoutSpec, Operand


class LayoutError(ValueError):
    pass


class ReservedOrder(LayoutError):
    pass


class CoordOutsidePartition(LayoutError):
    pass


class CapacityExceeded(LayoutError):
    pass


class UnoccupiedSlot(LayoutError):
    pass


RED, NR0, NR1 = "red", "nr0", "nr1"

# outermost -> innermost, per operand, indexed by order_id
_ORDERS = {
    Operand.W: [
        (RED, NR0, NR1), (RED, NR1, NR0), (NR0, RED, NR1),
        (NR0, NR1, RED), (NR1, RED, NR0), (NR1, NR0, RED),
    ],
    Operand.O: [
        (NR1, NR0, RED), (NR1, RED, NR0), (NR0, NR1, RED),
        (NR0, RED, NR1), (RED, NR1, NR0), (RED, NR0, NR1),
    ],
}
_ORDERS[Operand.I] = _ORDERS[Operand.W]

_RANK_NAMES = {
    Operand.W: {RED: "k_L1", NR0: "n_L0", NR1: "n_L1"},
    Operand.I: {RED: "j_L1", NR0: "m_L0", NR1: "m_L1"},
    Operand.O: {RED: "q_L1", NR0: "p_L0", NR1: "p_L1"},
}


def order_roles(operand: Operand, order_id: int) -> tuple[str, str, str]:
    """Generic rank roles (red/nr0/nr1), outermost first."""
    if not 0 <= order_id <= 5:
        raise ReservedOrder(f"order_id {order_id} is reserved")
    return _ORDERS[Operand(operand)][order_id]


def order_ranks(operand: Operand, order_id: int) -> tuple[str, str, str]:
    """Operand-specific rank names, e.g. (W, 2) -> ('n_L0', 'k_L1', 'n_L1')."""
    names = _RANK_NAMES[Operand(operand)]
    return tuple(names[r] for r in order_roles(operand, order_id))


@dataclass(frozen=True)
class VnCoord:
    operand: Operand
    r: int
    c: int


@dataclass(frozen=True)
class BufferAddress:
    slot_row: int
    col: int
    vn_size: int

    def element_row(self, e: int) -> int:
        return self.slot_row * self.vn_size + e


def _factors(spec: LayoutSpec) -> dict[str, int]:
    return {RED: spec.f_red_l1, NR0: spec.f_nr_l0, NR1: spec.f_nr_l1}


@lru_cache(maxsize=1024)
def rank_strides(spec: LayoutSpec) -> dict[str, int]:
    """Multiplier of each rank variable in the linear index L."""
    roles = order_roles(spec.operand, spec.order_id)
    f = _factors(spec)
    return {
        roles[0]: f[roles[1]] * f[roles[2]],
        roles[1]: f[roles[2]],
        roles[2]: 1,
    }


def in_partition(spec: LayoutSpec, r, c):
    """Elementwise test that (r, c) lies inside the layout's partition."""
    return (r >= 0) & (r < spec.f_red_l1) & (c >= 0) & (c < spec.f_nr_l0 * spec.f_nr_l1)


def flatten_index(spec: LayoutSpec, r, c):
    """Vectorized linear index; caller guarantees in-partition coordinates."""
    s = rank_strides(spec)
    c = np.asarray(c)
    return (
        np.asarray(r) * s[RED]
        + (c % spec.f_nr_l0) * s[NR0]
        + (c // spec.f_nr_l0) * s[NR1]
    )


def flatten_vn(coord: VnCoord, spec: LayoutSpec) -> int:
    if not in_partition(spec, coord.r, coord.c):
        raise CoordOutsidePartition(f"{coord} outside {spec}")
    return int(flatten_index(spec, coord.r, coord.c))


def region_slots(spec: LayoutSpec, geom: BufferGeometry, buffer: str) -> int:
    """VN slots available from the layout's base row to the end of the buffer."""
    rows = geom.depth(buffer) // spec.vn_size - spec.base
    return max(0, rows) * geom.aw


def vn_address(coord: VnCoord, spec: LayoutSpec, geom: BufferGeometry,
               buffer: str = "stationary") -> BufferAddress:
    L = flatten_vn(coord, spec)
    if L >= region_slots(spec, geom, buffer):
        raise CapacityExceeded(f"VN index {L} beyond buffer capacity")
    return BufferAddress(spec.base + L // geom.aw, L % geom.aw, spec.vn_size)


def inverse_address(addr: BufferAddress, spec: LayoutSpec, geom: BufferGeometry) -> VnCoord:
    L = (addr.slot_row - spec.base) * geom.aw + addr.col
    if addr.slot_row < spec.base or L >= spec.num_vns:
        raise UnoccupiedSlot(f"{addr} holds no VN of {spec}")
    roles = order_roles(spec.operand, spec.order_id)
    f = _factors(spec)
    vals = {}
    rem = L
    for role, size in zip(reversed(roles), [f[x] for x in reversed(roles)]):
        vals[role] = rem % size
        rem //= size
    return VnCoord(spec.operand, vals[RED], vals[NR1] * spec.f_nr_l0 + vals[NR0])


@dataclass(frozen=True)
class LayoutVerdict:
    ok: bool
    reasons: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


def check_layout(spec: LayoutSpec, geom: BufferGeometry, ah: int | None = None,
                 buffer: str = "stationary") -> LayoutVerdict:
    reasons = []
    if spec.order_id not in range(6):
        reasons.append("order")
    if spec.num_vns > region_slots(spec, geom, buffer):
        reasons.append("capacity")
    if spec.f_nr_l0 > geom.aw:
        reasons.append("l0-cap")
    if spec.vn_size < 1 or (ah is not None and spec.vn_size > ah):
        reasons.append("vn-size")
    if min(spec.f_red_l1, spec.f_nr_l0, spec.f_nr_l1) < 1:
        reasons.append("factor")
    return LayoutVerdict(not reasons, tuple(reasons))


def physical_rows(spec: LayoutSpec, geom: BufferGeometry) -> tuple[int, int]:
    """First physical row and row count of the region a layout occupies."""
    slot_rows = -(-spec.num_vns // geom.aw)
    return spec.base * spec.vn_size, slot_rows * spec.vn_size


def materialize(tensor: np.ndarray, spec: LayoutSpec, geom: BufferGeometry,
                buffer: str = "stationary", image: np.ndarray | None = None) -> np.ndarray:
    """Scatter a (reduction x non-reduction) tile into a buffer image.

    Positions inside the partition but outside the tensor are written as
    zero. When ``image`` is given it is updated in place, otherwise a fresh
    zeroed image of the buffer's full depth is returned.
    """
    verdict = check_layout(spec, geom, buffer=buffer)
    if not verdict:
        raise CapacityExceeded(f"layout rejected: {', '.join(verdict.reasons)}")
    tensor = np.asarray(tensor)
    if image is None:
        image = np.zeros((geom.depth(buffer), geom.aw), dtype=np.int64)
    vn = spec.vn_size
    nr = spec.f_nr_l0 * spec.f_nr_l1
    padded = np.zeros((spec.f_red_l1 * vn, nr), dtype=image.dtype)
    k = min(tensor.shape[0], padded.shape[0])
    n = min(tensor.shape[1], nr)
    padded[:k, :n] = tensor[:k, :n]
    r, c = np.meshgrid(np.arange(spec.f_red_l1), np.arange(nr), indexing="ij")
    L = flatten_index(spec, r, c)
    rows = spec.base + L // geom.aw
    cols = L % geom.aw
    blocks = padded.reshape(spec.f_red_l1, vn, nr)  # [r, e, c]
    for e in range(vn):
        image[rows * vn + e, cols] = blocks[:, e, :]
    return image


def gather(image: np.ndarray, spec: LayoutSpec, geom: BufferGeometry,
           shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`materialize`: read a (reduction x non-reduction) tile back."""
    vn = spec.vn_size
    nr = spec.f_nr_l0 * spec.f_nr_l1
    r, c = np.meshgrid(np.arange(spec.f_red_l1), np.arange(nr), indexing="ij")
    L = flatten_index(spec, r, c)
    rows = spec.base + L // geom.aw
    cols = L % geom.aw
    out = np.empty((spec.f_red_l1, vn, nr), dtype=image.dtype)
    for e in range(vn):
        out[:, e, :] = image[rows * vn + e, cols]
    full = out.reshape(spec.f_red_l1 * vn, nr)
    return full[: shape[0], : shape[1]]


def vn_label(operand: Operand, r: int, c: int) -> str:
    """Figure-style VN name; I and O VNs list the non-reduction index first."""
    op = Operand(operand)
    if op == Operand.W:
        return f"WVN({r},{c})"
    return f"{op.name}VN({c},{r})"


def dump_image(spec: LayoutSpec, geom: BufferGeometry) -> str:
    """Text grid ``row col : operand(r,c)[e]`` of every occupied element."""
    lines = []
    for L in range(spec.num_vns):
        addr = BufferAddress(spec.base + L // geom.aw, L % geom.aw, spec.vn_size)
        coord = inverse_address(addr, spec, geom)
        for e in range(spec.vn_size):
            lines.append(
                f"{addr.element_row(e)} {addr.col} : {spec.operand.name}({coord.r},{coord.c})[{e}]"
            )
    return "\n".join(lines) + "\n"


def slot_grid(spec: LayoutSpec, geom: BufferGeometry, rows: int | None = None) -> list[list[str]]:
    """VN labels per slot row, as drawn in layout illustrations."""
    n_rows = -(-spec.num_vns // geom.aw) if rows is None else rows
    grid = []
    for sr in range(n_rows):
        row = []
        for col in range(geom.aw):
            L = sr * geom.aw + col
            if L >= spec.num_vns:
                row.append("-")
                continue
            coord = inverse_address(BufferAddress(spec.base + sr, col, spec.vn_size), spec, geom)
            row.append(vn_label(spec.operand, coord.r, coord.c))
        grid.append(row)
    return grid


def convert_operand(spec: LayoutSpec, operand: Operand) -> LayoutSpec:
    """Same physical placement described as a layout of another operand.

    Order codes are operand specific, so the order_id is re-selected to keep
    the rank roles (reduction / level-0 / level-1) in the same nesting.
    """
    roles = order_roles(spec.operand, spec.order_id)
    new_id = _ORDERS[Operand(operand)].index(roles)
    return replace(spec, operand=Operand(operand), order_id=new_id)


def order_for_roles(operand: Operand, roles: tuple[str, str, str]) -> int:
    return _ORDERS[Operand(operand)].index(tuple(roles))
