"""Random generators shared by property tests and the acceptance suite."""

from __future__ import annotations

import math

import numpy as np

from minisa.mapper import dup_pairs, evaluate, tile_values, vn_options
from minisa.program import BLOCK, CONSECUTIVE, INTERLEAVED, STRIDED, Candidate

from minisa.isa import (
    OPCODES, ActDesc, ActFunc, Activation, Buffer, Commit, Dataflow, ExecuteMapping,
    ExecuteStreaming, LayoutSpec, Load, MappingEM, MappingES, Operand, SetIVNLayout,
    SetOVNLayout, SetWVNLayout, TransferDesc, Write, instruction_fields,
)

_RECORDS = {
    SetIVNLayout: LayoutSpec, SetWVNLayout: LayoutSpec, SetOVNLayout: LayoutSpec,
    ExecuteMapping: MappingEM, ExecuteStreaming: MappingES,
    Load: TransferDesc, Write: TransferDesc, Activation: ActDesc,
}
_OPERAND = {SetIVNLayout: Operand.I, SetWVNLayout: Operand.W, SetOVNLayout: Operand.O}
_ENUMS = {"df": Dataflow, "buffer": Buffer, "operand": Operand, "func": ActFunc, "commit": Commit}
KINDS = tuple(OPCODES)


def random_instruction(rng: np.random.Generator, cfg, kind=None):
    """A uniformly drawn in-range instruction of ``kind`` (random kind if None)."""
    if kind is None:
        kind = KINDS[rng.integers(len(KINDS))]
    payload, top = {}, {}
    for f in instruction_fields(kind, cfg):
        v = int(rng.integers(f.lo, f.hi + 1, dtype=np.int64))
        name = f.name
        if name in _ENUMS:
            v = _ENUMS[name](v)
        (payload if "." in f.path else top)[name] = v
    if kind in _OPERAND:
        payload["operand"] = _OPERAND[kind]
    attr = {LayoutSpec: "layout", MappingEM: "em", MappingES: "es",
            TransferDesc: "xfer", ActDesc: "act"}[_RECORDS[kind]]
    return kind(**{attr: _RECORDS[kind](**payload)}, **top)


def random_gemm(rng: np.random.Generator, m: int, k: int, n: int, lo: int = -8, hi: int = 8):
    return rng.integers(lo, hi, (m, k)), rng.integers(lo, hi, (k, n))


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def random_candidate(rng: np.random.Generator, workload, cfg, max_tiles: int = 128):
    """Knobs drawn one at a time, uniformly per knob, capped in tile count."""
    df = _pick(rng, (Dataflow.WOS, Dataflow.IOS))
    X, K, C = (workload.m, workload.k, workload.n) if df == Dataflow.WOS else (workload.n, workload.k, workload.m)
    vn = _pick(rng, vn_options(K, cfg.ah))
    m_t = _pick(rng, tile_values(X, cfg.ah))
    k_t = K if vn else _pick(rng, tile_values(K, cfg.ah))
    n_t = _pick(rng, tile_values(C, 1))
    if math.ceil(X / m_t) * math.ceil(K / k_t) * math.ceil(C / n_t) > max_tiles:
        return None
    n_col, d = _pick(rng, dup_pairs(cfg.aw))
    ist = _pick(rng, (INTERLEAVED, CONSECUTIVE)) if d == 1 else INTERLEAVED
    return Candidate(df, m_t, k_t, n_t, n_col, d, _pick(rng, (BLOCK, STRIDED)), ist, vn)


def random_solution(rng: np.random.Generator, workload, cfg, attempts: int = 200):
    """First feasible randomly drawn candidate, evaluated; None if all fail."""
    for _ in range(attempts):
        cand = random_candidate(rng, workload, cfg)
        if cand is None:
            continue
        sol = evaluate(cand, workload, cfg)
        if hasattr(sol, "trace"):
            return sol
    return None
