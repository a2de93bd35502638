"""Command-line entry point: evaluate, search, compare, analyze, plot.

Exit codes: 0 success, 2 usage or invalid configuration, 3 no feasible
mapping, 4 input/output failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .arch import EVAL_CONFIGS, ArchConfig, ConfigError, load_config, eval_config, parse_kv
from .isa import disassemble, dump_trace
from .mapper import NoFeasibleChain, NoFeasibleCandidate, ShapeMismatch, chain_search, search
from .microbaseline import (
    CALIBRATION_TARGET, COMPARISON_COLUMNS, CalibrationError, STALL_TABLE_WORKLOAD, calibrate,
    compare, load_calibration, micro_schedule, params_to_text,
)
from .workloads import WorkloadError, Workload, builtin_suite, load_baseline_csv, load_csv

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_IO = 0, 2, 3, 4

REPORT_COLUMNS = ("workload", "category", "ah", "aw", "total_cycles", "cycles_compute", "cycles_load",
                  "cycles_out2stream", "cycles_store", "stall_instr", "instr_bytes",
                  "data_bytes", "utilization")


# --------------------------------------------------------------------------
# sweep

def evaluate_one(task) -> dict:
    """Search one (workload, config) and time the baseline on the same trace."""
    wl, cfg, params = task
    sol = search(wl, cfg)
    rep = sol.report
    row = {"solution": sol.as_row(),
           "report": {"workload": wl.name, "category": wl.category, "ah": cfg.ah, "aw": cfg.aw,
                      **rep.as_row()}}
    if params is not None:
        micro = micro_schedule(sol.trace, cfg, params)
        row["compare"] = compare(rep, micro, cfg, wl.name).as_row()
    return row


def run_sweep(workloads, configs, jobs: int = 1, params=None) -> list[dict]:
    """Rows in (config, workload) order regardless of worker scheduling."""
    tasks = [(wl, cfg, params) for cfg in configs for wl in workloads]
    if jobs <= 1:
        return [evaluate_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(evaluate_one, tasks, chunksize=1))


def _write_csv(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: _fmt(r.get(k)) for k in columns})
    path.write_text(buf.getvalue())


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# --------------------------------------------------------------------------
# argument handling

def _configs(args) -> list[ArchConfig]:
    if getattr(args, "config", None):
        return [load_config(args.config)]
    ahs = [int(a) for a in (args.ah or [])]
    aws = list(args.aw or [])
    if not ahs and not aws:
        return [eval_config(ah, aw) for ah, aw in EVAL_CONFIGS]
    if not ahs:
        raise ConfigError("--aw given without --ah")
    if not aws:
        return [eval_config(ah, aw) for ah, aw in EVAL_CONFIGS if ah in ahs]
    out = []
    for ah in ahs:
        for aw in aws:
            out.append(eval_config(ah, ah if aw == "same" else int(aw)))
    return out


def _workloads(args) -> list[Workload]:
    return load_csv(args.csv) if args.csv else builtin_suite()


def _params(args):
    return load_calibration(getattr(args, "calibration", None))


def cmd_evaluate(args) -> int:
    configs, workloads = _configs(args), _workloads(args)
    out = Path(args.out)
    rows = run_sweep(workloads, configs, args.jobs)
    sol_rows = [r["solution"] for r in rows]
    _write_csv(out / "solutions.csv", list(sol_rows[0]) if sol_rows else ["name"], sol_rows)
    _write_csv(out / "reports.csv", REPORT_COLUMNS, [r["report"] for r in rows])
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def _layout_knobs(path) -> dict:
    kv = parse_kv(Path(path).read_text())
    allowed = {"o_w", "o_i", "o_o", "f_w", "f_i", "f_o"}
    bad = set(kv) - allowed
    if bad:
        raise ConfigError(f"unknown layout keys {sorted(bad)}")
    return {k: int(v) for k, v in kv.items()}


def cmd_search(args) -> int:
    configs, workloads = _configs(args), _workloads(args)
    if len(configs) != 1:
        raise ConfigError("search takes exactly one configuration")
    cfg = configs[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.chain:
        res = chain_search(workloads, cfg)
        trace, rows = res.trace, [s.as_row() for s in res.solutions]
        latency = res.latency
    else:
        if len(workloads) != 1:
            raise ConfigError("search takes one workload (use --chain for several)")
        knobs = _layout_knobs(args.layout_constrained) if args.layout_constrained else None
        sol = search(workloads[0], cfg, layout_knobs=knobs)
        trace, rows, latency = sol.trace, [sol.as_row()], sol.latency
    _write_csv(out / "solution.csv", list(rows[0]), rows)
    (out / "trace.bin").write_bytes(dump_trace(trace, cfg))
    (out / "trace.txt").write_text(disassemble(trace))
    print(f"latency {latency} cycles; wrote {out}")
    return EXIT_OK


def stall_table_traces() -> dict:
    m, k, n = STALL_TABLE_WORKLOAD
    wl = Workload("bconv", "stall_table", m, k, n)
    return {key: (search(wl, eval_config(*key)).trace, eval_config(*key)) for key in CALIBRATION_TARGET}


def cmd_compare(args) -> int:
    out = Path(args.out)
    if args.calibrate:
        params, err = calibrate(stall_table_traces())
        path = out / "calibration.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(f"# fitted stall L2 error {err:.6f}\n" + params_to_text(params))
        print(f"calibration written to {path} (L2 error {err:.4f})")
    else:
        params = _params(args)
    rows = run_sweep(_workloads(args), _configs(args), args.jobs, params)
    _write_csv(out / "comparison.csv", COMPARISON_COLUMNS, [r["compare"] for r in rows])
    _write_csv(out / "reports.csv", REPORT_COLUMNS, [r["report"] for r in rows])
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if not args.baseline_csv:
        raise ConfigError("analyze needs --baseline-csv")
    base = load_baseline_csv(args.baseline_csv)
    reports = _read_csv(Path(args.reports))
    rows = []
    for r in reports:
        name = r["workload"]
        if name not in base:
            continue
        ours_us = int(r["total_cycles"]) / args.freq_mhz
        rows.append({"workload": name, "ah": r["ah"], "aw": r["aw"], "ours_us": ours_us,
                     "baseline_us": base[name], "ratio": base[name] / ours_us})
    out = Path(args.out)
    _write_csv(out / "analysis.csv", ("workload", "ah", "aw", "ours_us", "baseline_us", "ratio"), rows)
    print(f"wrote {len(rows)} rows to {out / 'analysis.csv'}")
    return EXIT_OK


PLOT_FILES = {
    "instruction_reduction.csv": ("workload", "ah", "aw", "reduction", "minisa_itd", "micro_itd"),
    "speedup.csv": ("workload", "ah", "aw", "speedup", "micro_stall", "minisa_stall"),
    "latency_breakdown.csv": ("workload", "ah", "aw", "cycles_compute", "cycles_load",
                              "cycles_out2stream", "cycles_store", "utilization"),
}


def cmd_plot(args) -> int:
    out = Path(args.out)
    cmp_rows = _read_csv(Path(args.comparison)) if args.comparison else []
    rep_rows = _read_csv(Path(args.reports)) if args.reports else []
    key = lambda r: (int(r["ah"]), int(r["aw"]), r["workload"])  # noqa: E731
    cmp_rows.sort(key=key)
    rep_rows.sort(key=key)
    for name, cols in PLOT_FILES.items():
        src = rep_rows if name == "latency_breakdown.csv" else cmp_rows
        _write_csv(out / name, cols, src)
    (out / "speedup.svg").write_text(_bar_svg([(f"{r['ah']}x{r['aw']}", float(r["speedup"]))
                                               for r in _geomean_by_config(cmp_rows, "speedup")]))
    print(f"wrote plot data to {out}")
    return EXIT_OK


def _geomean_by_config(rows, col):
    groups: dict = {}
    for r in rows:
        groups.setdefault((int(r["ah"]), int(r["aw"])), []).append(float(r[col]))
    return [{"ah": a, "aw": w, col: math.exp(sum(map(math.log, v)) / len(v))}
            for (a, w), v in sorted(groups.items())]


def _bar_svg(bars) -> str:
    w, h = 40 * max(1, len(bars)) + 20, 220
    top = max([v for _, v in bars] + [1.0])
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">']
    for i, (label, v) in enumerate(bars):
        bh = 180 * v / top
        x = 20 + 40 * i
        parts.append(f'<rect x="{x}" y="{190 - bh:.1f}" width="30" height="{bh:.1f}" fill="#4472c4"/>')
        parts.append(f'<text x="{x}" y="205" font-size="8">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minisa", description="MINISA toolchain")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, workloads=True):
        sp.add_argument("--ah", action="append", help="array height (repeatable)")
        sp.add_argument("--aw", action="append", help="array width (repeatable, or 'same')")
        sp.add_argument("--config", help="architecture config file (overrides --ah/--aw)")
        if workloads:
            sp.add_argument("--csv", help="workload CSV (category,name,M,K,N)")
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--out", default="out")

    sp = sub.add_parser("evaluate", help="co-search every workload under every config")
    common(sp)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("search", help="search one workload or a chain")
    common(sp)
    sp.add_argument("--layout-constrained", metavar="LAYOUT_FILE",
                    help="fix layout knobs (o_i, f_i, o_o, f_o, ...) from a key=value file")
    sp.add_argument("--chain", action="store_true", help="treat CSV rows as consecutive layers")
    sp.set_defaults(fn=cmd_search)

    sp = sub.add_parser("compare", help="MINISA vs micro-instruction baseline")
    common(sp)
    sp.add_argument("--calibration", help="calibration file (default: committed)")
    sp.add_argument("--calibrate", action="store_true", help="refit the baseline constants first")
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("analyze", help="ratios against external device latencies")
    sp.add_argument("--reports", required=True, help="reports.csv from evaluate/compare")
    sp.add_argument("--baseline-csv", help="name,device,latency_us")
    sp.add_argument("--freq-mhz", type=float, default=1000.0)
    sp.add_argument("--out", default="out")
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("plot", help="emit plot-ready data files")
    sp.add_argument("--comparison", help="comparison.csv")
    sp.add_argument("--reports", help="reports.csv")
    sp.add_argument("--out", default="out")
    sp.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.fn(args)
    except (ConfigError, CalibrationError, ShapeMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NoFeasibleCandidate, NoFeasibleChain) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, WorkloadError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
