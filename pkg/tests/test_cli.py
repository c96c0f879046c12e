import json
import shutil
import subprocess
import sys

import pytest

from conftest import fixture
from retflip import __version__
from retflip.analysis import AddressPair, candidates_matched, diff_traces, write_candidates
from retflip.cli import EXIT_CONFIG, EXIT_FIXTURE, EXIT_INTERNAL, fixture_config, main, run_scan
from retflip.config import load_config
from retflip.faultsim import Injection, inject_and_run
from retflip.memmodel import (
    BaitModel,
    FlipRequirement,
    FlipStatistics,
    bait_simulation,
    curve_csv,
    pages_needed,
    probability_curve,
)
from retflip.report import dumps_report, records_jsonl
from retflip.timing import PRESETS, fingerprint_stack, time_sweep
from retflip.tracer import emit_trace, trace
from retflip.vm import draw_layout


def cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def auth_files(tmp_path, authgate):
    good = tmp_path / "good.bin"
    bad = tmp_path / "bad.bin"
    good.write_bytes(authgate.correct)
    bad.write_bytes(authgate.incorrect)
    return authgate.cfg.program, good, bad


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    out = capsys.readouterr().out
    assert __version__ in out and "LFTRACE1" in out and "LFCAND1" in out


def test_scan_matches_library(capsys, tmp_path):
    code, out, _ = cli(capsys, "scan", "--fixture", "authgate", "--d", 1, "--step2", "on",
                       "--records", tmp_path / "r.jsonl", "--labels", tmp_path / "l.csv")
    assert code == 0
    report, result, rules = run_scan(load_config(fixture_config("authgate")))
    assert out == dumps_report(report)
    assert (tmp_path / "r.jsonl").read_text() == records_jsonl(result.outcomes, rules)
    assert "misauthentication,1" in (tmp_path / "l.csv").read_text()
    assert json.loads(out)["counts"]["labels"]["misauthentication"] >= 1


def test_scan_twice_is_byte_identical(capsys):
    _, a, _ = cli(capsys, "scan", "--fixture", "toycipher", "--seed", 7)
    _, b, _ = cli(capsys, "scan", "--fixture", "toycipher", "--seed", 7)
    assert a == b
    gadgets = json.loads(a)["gadgets"]
    leaks = [g for g in gadgets if g["label"] == "plaintext_leak"]
    assert leaks and b"helloworld" in bytes.fromhex(leaks[0]["stdout"])


def test_trace_diff_candidates_chain(capsys, tmp_path, auth_files):
    prog, good, bad = auth_files
    tg, tb = tmp_path / "g.tr", tmp_path / "b.tr"
    assert cli(capsys, "trace", prog, "--input", good, "-o", tg)[0] == 0
    assert cli(capsys, "trace", prog, "--input", bad, "-o", tb,
               "--timings", tmp_path / "t.csv")[0] == 0
    a = fixture("authgate")
    lib_good = trace(a.program, a.correct)
    lib_bad = trace(a.program, a.incorrect)
    assert tg.read_text() == emit_trace(lib_good)
    code, out, _ = cli(capsys, "diff", tg, tb)
    diff = diff_traces(lib_good, lib_bad)
    assert out == "".join(f"{x:#x}\n" for x in sorted(diff.addresses))
    (tmp_path / "d.txt").write_text(out)
    code, out, _ = cli(capsys, "candidates", tb, "--targets", tmp_path / "d.txt")
    assert out == write_candidates(candidates_matched(lib_bad, diff))
    code, out, _ = cli(capsys, "candidates", tb, "--d", 2, "--workers", 3)
    assert out == write_candidates(candidates_matched(lib_bad, d=2))


def test_simulate_and_classify(capsys, tmp_path, auth_files):
    prog, _, bad = auth_files
    a = fixture("authgate")
    code, out, _ = cli(capsys, "simulate", prog, "--input", bad, "--src", "+0x16",
                       "--dest", "+0x36", "--fixture", "authgate")
    base = draw_layout(a.program, 0).code_base
    pair = AddressPair(base + 0x16, base + 0x36, 0x20)
    want = inject_and_run(a.program, a.incorrect, 0, 1_000_000, Injection(pair, 0))
    assert out == records_jsonl([want], a.rules)
    assert json.loads(out)["label"] == "misauthentication"
    recs = tmp_path / "r.jsonl"
    recs.write_text(out.replace('"misauthentication"', '"?"'))
    code, out, _ = cli(capsys, "classify", recs, "--fixture", "authgate",
                       "--labels", tmp_path / "l.csv")
    assert json.loads(out)["label"] == "misauthentication"
    assert (tmp_path / "l.csv").read_text() == "label,count\nmisauthentication,1\n"
    cands = tmp_path / "c.txt"
    cands.write_text(write_candidates([pair]))
    code, out, _ = cli(capsys, "simulate", prog, "--input", bad, "--candidates", cands)
    assert len(out.splitlines()) == 2  # occurrence 0 and the unfired N+1 attempt


def test_sweep_matches_library(capsys, auth_files):
    prog, _, bad = auth_files
    a = fixture("authgate")
    code, out, err = cli(capsys, "sweep", prog, "--input", bad, "--src", "+0x16",
                         "--start", 0, "--interval", 20_000, "--trials", 50)
    base = draw_layout(a.program, 0).code_base
    rep = time_sweep(a.program, a.incorrect, 0, base + 0x16, 0, 20_000,
                     PRESETS["bash-like"], 50)
    assert out == rep.to_csv() and "best stop_tick=" in err


def test_fingerprint_matches_library(capsys, auth_files):
    prog, _, bad = auth_files
    a = fixture("authgate")
    code, out, err = cli(capsys, "fingerprint", prog, "--input", bad, "--seeds", "0,1,2",
                         "--tick", 50_000, "--src", "+0x16", "--locate-seed", 77)
    assert code == 0
    base = draw_layout(a.program, 0).code_base
    fp = fingerprint_stack(a.program, a.incorrect, [0, 1, 2], 50_000, base + 0x16)
    assert out == fp.to_text()
    want = draw_layout(a.program, 77).code_base + 0x16
    assert f"holds {want:#x}" in err
    code, _, err = cli(capsys, "fingerprint", prog, "--input", bad, "--tick", 150_000,
                       "--src", "+0x16")
    assert code == EXIT_FIXTURE


def test_prob_and_baitsim(capsys):
    code, out, _ = cli(capsys, "prob", "--k", 1, "--l", 1, "--n-max", 3000, "--n-step", 1000)
    stats = FlipStatistics(100, 100, 32768, 0)
    req = FlipRequirement(1, 1)
    assert out == curve_csv(probability_curve(stats, req, range(0, 3001, 1000)))
    code, out, _ = cli(capsys, "prob", "--target", 0.99)
    assert int(out) == pages_needed(stats, FlipRequirement(1, 0), 0.99)
    code, out, _ = cli(capsys, "prob", "--n01", 0, "--target", 0.5)
    assert code == EXIT_CONFIG
    code, out, _ = cli(capsys, "baitsim", "--b-max", 40, "--trials", 3000, "--seed", 2)
    est = bait_simulation(BaitModel(0, 30, 0.3), 3000, 2, range(0, 41))
    assert out == curve_csv(sorted(est.items()), "B")


def test_asm_disasm_run(capsys, tmp_path):
    src = tmp_path / "p.asm"
    src.write_text('main:\n movi r0, 1\n movi r1, msg\n add r1, r7\n movi r2, 3\n sys 1\n'
                   ' halt 4\n.data msg "hey"\n')
    obj = tmp_path / "p.obj"
    assert cli(capsys, "asm", src, "-o", obj)[0] == 0
    code, out, err = cli(capsys, "run", obj)
    assert code == 0 and "exited(4)" in err
    code, out, _ = cli(capsys, "disasm", obj)
    assert "movi r2, 0x3" in out


def test_exit_codes(capsys, tmp_path):
    assert cli(capsys, "scan")[0] == EXIT_CONFIG
    assert cli(capsys, "scan", "--fixture", "nope")[0] == EXIT_CONFIG
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    assert cli(capsys, "scan", "--config", bad)[0] == EXIT_CONFIG
    broken = tmp_path / "broken.asm"
    broken.write_text("frob r1\n")
    assert cli(capsys, "run", broken)[0] == EXIT_FIXTURE
    assert cli(capsys, "run", tmp_path / "missing.asm")[0] == EXIT_CONFIG
    cfg = tmp_path / "c.cfg"
    (tmp_path / "in.bin").write_bytes(b"")
    cfg.write_text(f"program = {broken}\ncorrect_input = in.bin\nincorrect_input = in.bin\n")
    assert cli(capsys, "scan", "--config", cfg)[0] == EXIT_FIXTURE


def test_internal_errors_map_to_their_own_code(capsys, monkeypatch):
    import retflip.cli as c

    def boom(report):
        raise AssertionError("counts drifted")

    monkeypatch.setattr(c, "validate_report", boom)
    code, _, err = cli(capsys, "scan", "--fixture", "straightline")
    assert code == EXIT_INTERNAL and "internal" in err


def test_console_script_runs():
    exe = shutil.which("retflip")
    cmd = [exe] if exe else [sys.executable, "-m", "retflip.cli"]
    out = subprocess.run(cmd + ["prob", "--n-max", "0"], capture_output=True, text=True,
                         check=True)
    assert out.stdout.startswith("N,probability\n0,0\n")
