import csv
import subprocess
import sys

import pytest

from minisa.arch import config_to_text, small_config
from minisa.cli import EXIT_INFEASIBLE, EXIT_IO, EXIT_OK, EXIT_USAGE, REPORT_COLUMNS, main
from minisa.isa import load_trace
from minisa.microbaseline import COMPARISON_COLUMNS


def rows(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.csv"
    p.write_text("category,name,M,K,N\nt,a,8,8,8\nt,b,12,6,10\n")
    return p


@pytest.fixture
def chain_csv(tmp_path):
    p = tmp_path / "chain.csv"
    p.write_text("category,name,M,K,N\nmlp,l0,8,8,8\nmlp,l1,8,8,4\n")
    return p


class TestEvaluate:
    def test_writes_reports(self, tmp_path, tiny) -> None:
        out = tmp_path / "o"
        assert main(["evaluate", "--ah", "4", "--aw", "4", "--aw", "16", "--csv", str(tiny), "--out", str(out)]) == EXIT_OK
        reps = rows(out / "reports.csv")
        assert list(reps[0]) == list(REPORT_COLUMNS)
        assert [(r["ah"], r["aw"], r["workload"]) for r in reps] == [
            ("4", "4", "a"), ("4", "4", "b"), ("4", "16", "a"), ("4", "16", "b")]
        assert len(rows(out / "solutions.csv")) == 4

    def test_deterministic(self, tmp_path, tiny) -> None:
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            main(["evaluate", "--ah", "4", "--aw", "same", "--csv", str(tiny), "--out", str(out)])
        assert (a / "reports.csv").read_bytes() == (b / "reports.csv").read_bytes()
        assert (a / "solutions.csv").read_bytes() == (b / "solutions.csv").read_bytes()

    def test_jobs_match_serial(self, tmp_path, tiny) -> None:
        a, b = tmp_path / "a", tmp_path / "b"
        main(["evaluate", "--ah", "4", "--aw", "4", "--csv", str(tiny), "--out", str(a)])
        main(["evaluate", "--ah", "4", "--aw", "4", "--csv", str(tiny), "--out", str(b), "--jobs", "2"])
        assert (a / "reports.csv").read_bytes() == (b / "reports.csv").read_bytes()

    def test_config_file(self, tmp_path, tiny) -> None:
        cfg = tmp_path / "arch.txt"
        cfg.write_text(config_to_text(small_config(4, 8)))
        out = tmp_path / "o"
        assert main(["evaluate", "--config", str(cfg), "--csv", str(tiny), "--out", str(out)]) == EXIT_OK
        assert {(r["ah"], r["aw"]) for r in rows(out / "reports.csv")} == {("4", "8")}


class TestSearch:
    def test_single(self, tmp_path, tiny) -> None:
        one = tmp_path / "one.csv"
        one.write_text("category,name,M,K,N\nt,a,8,8,8\n")
        out = tmp_path / "o"
        assert main(["search", "--ah", "4", "--aw", "4", "--csv", str(one), "--out", str(out)]) == EXIT_OK
        sol = rows(out / "solution.csv")[0]
        trace, cfg = load_trace((out / "trace.bin").read_bytes())
        assert (cfg.ah, cfg.aw) == (4, 4)
        assert (out / "trace.txt").read_text().strip() != "" and len(trace) > 0
        assert int(sol["latency"]) > 0

    def test_layout_constrained(self, tmp_path) -> None:
        one = tmp_path / "one.csv"
        one.write_text("category,name,M,K,N\nt,a,8,8,8\n")
        lay = tmp_path / "lay.txt"
        lay.write_text("o_o = 0\n")
        out = tmp_path / "o"
        assert main(["search", "--ah", "4", "--aw", "4", "--csv", str(one), "--layout-constrained", str(lay),
                     "--out", str(out)]) == EXIT_OK
        assert rows(out / "solution.csv")[0]["o_o"] == "0"

    def test_chain(self, tmp_path, chain_csv) -> None:
        out = tmp_path / "o"
        assert main(["search", "--ah", "4", "--aw", "4", "--csv", str(chain_csv), "--chain", "--out", str(out)]) == EXIT_OK
        assert [r["name"] for r in rows(out / "solution.csv")] == ["l0", "l1"]

    def test_infeasible_layout(self, tmp_path) -> None:
        one = tmp_path / "one.csv"
        one.write_text("category,name,M,K,N\nt,a,8,8,8\n")
        lay = tmp_path / "lay.txt"
        lay.write_text("f_i = 64\n")
        assert main(["search", "--ah", "4", "--aw", "4", "--csv", str(one), "--layout-constrained", str(lay),
                     "--out", str(tmp_path / "o")]) == EXIT_INFEASIBLE

    def test_unknown_layout_key(self, tmp_path) -> None:
        one = tmp_path / "one.csv"
        one.write_text("category,name,M,K,N\nt,a,8,8,8\n")
        lay = tmp_path / "lay.txt"
        lay.write_text("bogus = 1\n")
        assert main(["search", "--ah", "4", "--aw", "4", "--csv", str(one), "--layout-constrained", str(lay),
                     "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_chain_shape_mismatch(self, tmp_path, tiny) -> None:
        assert main(["search", "--ah", "4", "--aw", "4", "--csv", str(tiny), "--chain",
                     "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_many_workloads_without_chain(self, tmp_path, tiny) -> None:
        assert main(["search", "--ah", "4", "--aw", "4", "--csv", str(tiny), "--out", str(tmp_path / "o")]) == EXIT_USAGE


class TestCompareAnalyzePlot:
    def test_pipeline(self, tmp_path, tiny) -> None:
        out = tmp_path / "o"
        assert main(["compare", "--ah", "4", "--aw", "4", "--aw", "64", "--csv", str(tiny), "--out", str(out)]) == EXIT_OK
        cmp = rows(out / "comparison.csv")
        assert list(cmp[0]) == list(COMPARISON_COLUMNS)
        assert all(float(r["reduction"]) >= 1 for r in cmp)
        assert float(cmp[-1]["speedup"]) > 1  # 4x64 is fetch-bound for the baseline

        base = tmp_path / "base.csv"
        base.write_text("name,device,latency_us\na,gpu,10\n")
        assert main(["analyze", "--reports", str(out / "reports.csv"), "--baseline-csv", str(base),
                     "--out", str(out)]) == EXIT_OK
        ana = rows(out / "analysis.csv")
        assert [r["workload"] for r in ana] == ["a", "a"]
        assert float(ana[0]["ratio"]) == pytest.approx(10 / float(ana[0]["ours_us"]), rel=1e-5)

        assert main(["plot", "--comparison", str(out / "comparison.csv"), "--reports", str(out / "reports.csv"),
                     "--out", str(out)]) == EXIT_OK
        for name in ("instruction_reduction.csv", "speedup.csv", "latency_breakdown.csv"):
            assert len(rows(out / name)) == 4
        assert (out / "speedup.svg").read_text().count("<rect") == 2

    def test_calibration_file(self, tmp_path, tiny) -> None:
        cal = tmp_path / "cal.txt"
        cal.write_text("replay = 0\n")
        out = tmp_path / "o"
        assert main(["compare", "--ah", "4", "--aw", "4", "--csv", str(tiny), "--calibration", str(cal),
                     "--out", str(out)]) == EXIT_OK
        bad = tmp_path / "bad.txt"
        bad.write_text("nonsense = 1\n")
        assert main(["compare", "--ah", "4", "--aw", "4", "--csv", str(tiny), "--calibration", str(bad),
                     "--out", str(out)]) == EXIT_USAGE

    def test_analyze_requires_baseline(self, tmp_path) -> None:
        reps = tmp_path / "r.csv"
        reps.write_text(",".join(REPORT_COLUMNS) + "\n")
        assert main(["analyze", "--reports", str(reps), "--out", str(tmp_path)]) == EXIT_USAGE


class TestExitCodes:
    def test_missing_csv(self, tmp_path) -> None:
        assert main(["evaluate", "--ah", "4", "--aw", "4", "--csv", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path)]) == EXIT_IO

    def test_bad_csv(self, tmp_path) -> None:
        p = tmp_path / "bad.csv"
        p.write_text("category,name,M,K,N\nt,a,0,1,1\n")
        assert main(["evaluate", "--ah", "4", "--aw", "4", "--csv", str(p), "--out", str(tmp_path)]) == EXIT_IO

    def test_bad_aw(self, tmp_path, tiny) -> None:
        assert main(["evaluate", "--ah", "4", "--aw", "6", "--csv", str(tiny), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_aw_without_ah(self, tmp_path, tiny) -> None:
        assert main(["evaluate", "--aw", "4", "--csv", str(tiny), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_argparse_usage(self) -> None:
        with pytest.raises(SystemExit) as exc:
            main(["evaluate", "--jobs", "0"])
        assert exc.value.code == EXIT_USAGE

    def test_module_entry(self) -> None:
        res = subprocess.run([sys.executable, "-m", "minisa", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "evaluate" in res.stdout
