"""Regenerate the golden baseline files of the bundled fixtures."""

import argparse
from pathlib import Path

from retflip.asm import load_program
from retflip.cli import FIXTURES, fixture_config, run_scan
from retflip.config import load_config
from retflip.vm import run


def golden_text(name):
    cfg = load_config(fixture_config(name))
    program_lines = []
    prog = load_program(cfg.program)
    for tag, path in (("correct", cfg.correct_input), ("incorrect", cfg.incorrect_input)):
        res = run(prog, Path(path).read_bytes(), cfg.seed, cfg.budget, cfg.degradation)
        program_lines.append(
            f"{tag} termination={res.termination.kind} exit={res.termination.code} "
            f"ticks={res.ticks} instructions={res.instructions_executed} "
            f"stdout={res.stdout.hex() or '-'} stderr={res.stderr.hex() or '-'}")
    report, _, _ = run_scan(cfg)
    for g in report["gadgets"]:
        program_lines.append(f"gadget src={g['src_offset']} dest={g['dest_offset']} "
                             f"label={g['label']} occurrences="
                             + ",".join(str(o) for o in g["occurrences"]))
    return "\n".join(program_lines) + "\n"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--check", action="store_true", help="compare instead of writing")
    args = ap.parse_args()
    bad = 0
    for name in FIXTURES:
        path = fixture_config(name).with_suffix(".golden")
        text = golden_text(name)
        if args.check:
            if path.read_text() != text:
                print(f"{name}: golden file differs")
                bad += 1
        else:
            path.write_text(text)
            print(f"wrote {path}")
    raise SystemExit(1 if bad else 0)


if __name__ == "__main__":
    main()
