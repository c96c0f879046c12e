"""Command-line entry point."""

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import FORMATS, __version__
from .analysis import (
    AddressPair,
    DiffSet,
    candidates_exhaustive_offset,
    candidates_matched,
    diff_traces,
    read_candidates,
    write_candidates,
)
from .asm import AssemblyError, disassemble, load_program, write_object
from .config import ConfigError, load_config, parse_bool, stop_model_of
from .faultsim import (
    MODES,
    Injection,
    ScanSettings,
    StageError,
    classify,
    inject_and_run,
    parse_rules,
    scan,
    standard_rules,
)
from .memmodel import (
    BaitModel,
    FlipRequirement,
    FlipStatistics,
    Unattainable,
    bait_simulation,
    curve_csv,
    pages_needed,
    probability_curve,
)
from .report import (
    build_report,
    dumps_report,
    label_counts_csv,
    outcome_record,
    records_jsonl,
    validate_report,
)
from .timing import FingerprintError, fingerprint_stack, locate, snapshot, time_sweep
from .tracer import emit_trace, function_timings, parse_trace, timings_csv, trace
from .vm import DEFAULT_BUDGET, ExecutionResult, Termination, draw_layout, run

EXIT_CONFIG = 2
EXIT_FIXTURE = 3
EXIT_INTERNAL = 4
FIXTURES = ("authgate", "toycipher", "treeclass", "straightline")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def fixture_dir():
    return Path(str(resources.files("retflip").joinpath("corpus")))


def fixture_config(name):
    if name not in FIXTURES:
        raise CliError(f"unknown fixture {name!r} (choose from {', '.join(FIXTURES)})",
                       EXIT_CONFIG)
    return fixture_dir() / f"{name}.cfg"


def _read_bytes(path):
    if path is None:
        return b""
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_CONFIG) from None


def _program(path):
    try:
        return load_program(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_CONFIG) from None
    except (AssemblyError, ValueError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_FIXTURE) from None


def _text(path):
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_CONFIG) from None


def parse_addr(text, code_base):
    """``0x...`` is absolute; ``+0x...`` is an offset from the code base."""
    try:
        if text.startswith("+"):
            return code_base + int(text[1:], 0)
        return int(text, 0)
    except ValueError:
        raise CliError(f"bad address {text!r}", EXIT_CONFIG) from None


def _emit(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        try:
            Path(out).write_text(text)
        except OSError as exc:
            raise CliError(f"cannot write {out}: {exc.strerror}", EXIT_CONFIG) from None


# -- subcommands ---------------------------------------------------------------

def scan_config(args):
    if bool(args.config) == bool(args.fixture):
        raise CliError("give exactly one of --config or --fixture", EXIT_CONFIG)
    path = args.config or fixture_config(args.fixture)
    overrides = {
        "d": args.d, "seed": args.seed, "workers": args.workers, "budget": args.budget,
        "degradation": args.degradation, "candidate_mode": args.candidate_mode,
        "mode": args.mode, "stop_model": args.stop_model,
        "step2": None if args.step2 is None else parse_bool(args.step2, "step2"),
        "low_bits_only": (None if args.low_bits_only is None
                          else parse_bool(args.low_bits_only, "low_bits_only")),
    }
    return load_config(path, overrides)


def run_scan(cfg):
    """Library-level scan driven by a ScanConfig; returns (report, result, rules)."""
    program = _program(cfg.program)
    correct = _read_bytes(cfg.correct_input)
    incorrect = _read_bytes(cfg.incorrect_input)
    rules = cfg.classification_rules()
    settings = ScanSettings(candidate_mode=cfg.candidate_mode, d=cfg.d,
                            low_bits_only=cfg.low_bits_only, step2=cfg.step2, rules=rules,
                            budget=cfg.budget, degradation=cfg.degradation, seed=cfg.seed,
                            workers=cfg.workers, mode=cfg.mode)
    result = scan(program, correct, incorrect, settings)
    report = build_report(result, program, incorrect, settings, cfg.echo(),
                          stop_model_of(cfg.stop_model))
    return report, result, rules


def cmd_scan(args):
    cfg = scan_config(args)
    report, result, rules = run_scan(cfg)
    try:
        validate_report(report)
    except jsonschema.ValidationError as exc:
        raise CliError(f"report failed validation: {exc.message}", EXIT_INTERNAL) from None
    _emit(dumps_report(report), args.output)
    if args.records:
        _emit(records_jsonl(result.outcomes, rules), args.records)
    if args.labels:
        _emit(label_counts_csv(report["counts"]["labels"]), args.labels)
    return 0


def cmd_asm(args):
    _emit(write_object(_program(args.source)), args.output)
    return 0


def cmd_disasm(args):
    _emit(disassemble(_program(args.program)), args.output)
    return 0


def cmd_run(args):
    res = run(_program(args.program), _read_bytes(args.input), args.seed, args.budget,
              args.degradation)
    sys.stdout.buffer.write(res.stdout)
    sys.stderr.buffer.write(res.stderr)
    sys.stderr.write(f"{res.termination} ticks={res.ticks} "
                     f"instructions={res.instructions_executed}\n")
    return 0


def cmd_trace(args):
    program = _program(args.program)
    inp = _read_bytes(args.input)
    tr = trace(program, inp, args.seed, args.budget, args.degradation)
    _emit(emit_trace(tr), args.output)
    if args.timings:
        _emit(timings_csv(function_timings(program, inp, args.seed, args.budget,
                                           args.degradation)), args.timings)
    return 0


def _load_trace(path):
    try:
        return parse_trace(_text(path))
    except ValueError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG) from None


def diff_text(diff):
    return "".join(f"{a:#x}\n" for a in sorted(diff.addresses))


def cmd_diff(args):
    try:
        diff = diff_traces(_load_trace(args.correct), _load_trace(args.incorrect))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    _emit(diff_text(diff), args.output)
    return 0


def cmd_candidates(args):
    tr = _load_trace(args.trace)
    if args.exhaustive_offset:
        pairs = candidates_exhaustive_offset(tr)
    else:
        targets = None
        if args.targets:
            lines = _text(args.targets).split()
            targets = DiffSet(frozenset(int(x, 16) for x in lines))
        pairs = candidates_matched(tr, targets, args.d, args.low_bits_only, args.workers)
    _emit(write_candidates(pairs), args.output)
    return 0


def cmd_simulate(args):
    program = _program(args.program)
    inp = _read_bytes(args.input)
    base = draw_layout(program, args.seed).code_base
    if args.candidates:
        pairs = read_candidates(_text(args.candidates))
        baseline = trace(program, inp, args.seed, args.budget)
        jobs = [(p, k) for p in pairs for k in range(baseline.occurrences(p.addr_src) + 1)]
    else:
        if args.src is None or args.dest is None:
            raise CliError("give --src and --dest, or --candidates", EXIT_CONFIG)
        src, dest = parse_addr(args.src, base), parse_addr(args.dest, base)
        jobs = [(AddressPair(src, dest, src ^ dest), args.occurrence)]
    rules = standard_rules(_rules_arg(args))
    outcomes = [inject_and_run(program, inp, args.seed, args.budget, Injection(p, k, args.mode))
                for p, k in jobs]
    _emit(records_jsonl(outcomes, rules), args.output)
    return 0


def _rules_arg(args):
    if getattr(args, "rules", None):
        try:
            return parse_rules(_text(args.rules).splitlines())
        except ValueError as exc:
            raise CliError(f"{args.rules}: {exc}", EXIT_CONFIG) from None
    if getattr(args, "fixture", None):
        return load_config(fixture_config(args.fixture)).rules
    return []


def result_from_record(rec):
    kind = rec["termination"]
    term = Termination(kind, rec.get("exit_code"))
    return ExecutionResult(term, rec.get("ticks", 0), rec.get("instructions", 0),
                           bytes.fromhex(rec.get("stdout", "")),
                           bytes.fromhex(rec.get("stderr", "")))


def cmd_classify(args):
    rules = standard_rules(_rules_arg(args))
    out = []
    counts = {}
    for lineno, line in enumerate(_text(args.records).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            res = result_from_record(rec)
        except (ValueError, KeyError) as exc:
            raise CliError(f"{args.records}:{lineno}: bad record ({exc})", EXIT_CONFIG) from None
        rec["label"] = classify(res, rules)
        counts[rec["label"]] = counts.get(rec["label"], 0) + 1
        out.append(json.dumps(rec, sort_keys=True) + "\n")
    _emit("".join(out), args.output)
    if args.labels:
        _emit(label_counts_csv(counts), args.labels)
    return 0


def cmd_sweep(args):
    program = _program(args.program)
    inp = _read_bytes(args.input)
    base = draw_layout(program, args.seed).code_base
    model = stop_model_of(args.model)
    rep = time_sweep(program, inp, args.seed, parse_addr(args.src, base), args.start,
                     args.interval, model, args.trials, args.points, args.budget,
                     args.degradation, workers=args.workers)
    _emit(rep.to_csv(), args.output)
    best = rep.best
    if best is not None:
        sys.stderr.write(f"best stop_tick={best.stop_tick} hit_rate={best.hit_rate:.6f}\n")
    return 0


def cmd_fingerprint(args):
    program = _program(args.program)
    inp = _read_bytes(args.input)
    seeds = [int(s) for s in args.seeds.split(",")]
    base = draw_layout(program, seeds[0]).code_base
    src = parse_addr(args.src, base)
    try:
        fp = fingerprint_stack(program, inp, seeds, args.tick, src, args.budget)
    except FingerprintError as exc:
        raise CliError(f"fingerprint failed: {exc}", EXIT_FIXTURE) from None
    _emit(fp.to_text(), args.output)
    if args.locate_seed is not None:
        snap = snapshot(program, inp, args.locate_seed, args.tick, args.budget)
        try:
            slot = locate(snap, fp)
        except FingerprintError as exc:
            raise CliError(f"locate failed: {exc}", EXIT_FIXTURE) from None
        sys.stderr.write(f"seed {args.locate_seed}: slot {slot:#x} holds "
                         f"{snap.words.get(slot, 0):#x}\n")
    return 0


def cmd_prob(args):
    stats = FlipStatistics(args.n01, args.n10, args.S, args.N)
    req = FlipRequirement(args.k, args.l)
    if args.target is not None:
        try:
            n = pages_needed(stats, req, args.target)
        except Unattainable as exc:
            raise CliError(str(exc), EXIT_CONFIG) from None
        _emit(f"{n}\n", args.output)
        return 0
    ns = range(args.n_min, args.n_max + 1, args.n_step)
    _emit(curve_csv(probability_curve(stats, req, ns), "N"), args.output)
    return 0


def cmd_baitsim(args):
    model = BaitModel(args.b_min, args.demand, args.noise)
    est = bait_simulation(model, args.trials, args.seed, range(args.b_min, args.b_max + 1),
                          args.workers)
    _emit(curve_csv(sorted(est.items()), "B"), args.output)
    return 0


# -- parser --------------------------------------------------------------------

def _common_run(p, program=True):
    if program:
        p.add_argument("program", help="assembly source or LFOBJ1 object")
        p.add_argument("--input", help="file fed to the read syscall")
    p.add_argument("--seed", type=int, default=0, help="ASLR seed (default 0)")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="tick budget")
    p.add_argument("--degradation", type=int, default=1, help="ticks per instruction")
    p.add_argument("-o", "--output", help="output file (default stdout)")


def build_parser():
    ap = argparse.ArgumentParser(prog="retflip",
                                 description="Return-address bit-flip gadget scanner.")
    ap.add_argument("--version", action="version",
                    version=f"retflip {__version__} (formats: "
                            + ", ".join(f"{k}={v}" for k, v in FORMATS.items()) + ")")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="full pipeline: trace, diff, candidates, simulate, classify")
    p.add_argument("--config", help="scan configuration file")
    p.add_argument("--fixture", help=f"bundled fixture ({', '.join(FIXTURES)})")
    p.add_argument("--d", type=int, help="Hamming distance")
    p.add_argument("--step2", help="on/off: restrict destinations to the trace diff")
    p.add_argument("--low-bits-only", help="on/off: flips in the page offset only")
    p.add_argument("--candidate-mode", choices=("matched", "exhaustive_offset"))
    p.add_argument("--mode", choices=MODES, help="fault injection mode")
    p.add_argument("--stop-model", help="stop preset or 'mean,stddev'")
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--degradation", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("-o", "--output", help="report file (default stdout)")
    p.add_argument("--records", help="write one JSON line per injection here")
    p.add_argument("--labels", help="write label,count CSV here")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("asm", help="assemble to an LFOBJ1 object")
    p.add_argument("source")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_asm)

    p = sub.add_parser("disasm", help="disassemble a program back to source")
    p.add_argument("program")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_disasm)

    p = sub.add_parser("run", help="execute a program")
    _common_run(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("trace", help="instruction trace (LFTRACE1)")
    _common_run(p)
    p.add_argument("--timings", help="also write function timings CSV here")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("diff", help="addresses run by the correct trace only")
    p.add_argument("correct")
    p.add_argument("incorrect")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("candidates", help="Hamming-distance address pairs (LFCAND1)")
    p.add_argument("trace")
    p.add_argument("--targets", help="destination list, e.g. output of diff")
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--low-bits-only", action="store_true")
    p.add_argument("--exhaustive-offset", action="store_true",
                   help="every page-offset bit of every return address")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_candidates)

    p = sub.add_parser("simulate", help="inject return-address flips (JSON lines)")
    _common_run(p)
    p.add_argument("--src", help="return address (0x.. absolute or +0x.. offset)")
    p.add_argument("--dest", help="destination address")
    p.add_argument("--occurrence", type=int, default=0)
    p.add_argument("--candidates", help="LFCAND1 file: simulate every pair and occurrence")
    p.add_argument("--mode", choices=MODES, default=MODES[0])
    p.add_argument("--rules", help="file of 'rule LABEL: ...' lines")
    p.add_argument("--fixture", help="take rules from a bundled fixture")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("classify", help="label injection records with rules")
    p.add_argument("records", help="JSON lines from simulate or scan --records")
    p.add_argument("--rules")
    p.add_argument("--fixture")
    p.add_argument("--labels", help="write label,count CSV here")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("sweep", help="stop-signal time sweep (CSV)")
    _common_run(p)
    p.add_argument("--src", required=True)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--interval", type=int, default=100)
    p.add_argument("--points", type=int, help="stop points (default: cover the run)")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--model", default="bash-like", help="stop preset or 'mean,stddev'")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fingerprint", help="ASLR-invariant stack fingerprint (LFFP1)")
    _common_run(p)
    p.add_argument("--seeds", default="0,1,2,3", help="comma-separated ASLR seeds")
    p.add_argument("--tick", type=int, required=True, help="stop tick inside the window")
    p.add_argument("--src", required=True, help="return address under the first seed")
    p.add_argument("--locate-seed", type=int, help="locate the slot under this seed")
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("prob", help="compatible-page probability curve (CSV)")
    p.add_argument("--n01", type=float, default=100)
    p.add_argument("--n10", type=float, default=100)
    p.add_argument("--S", type=int, default=32768)
    p.add_argument("--N", type=int, default=0)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--l", type=int, default=0)
    p.add_argument("--n-min", type=int, default=0)
    p.add_argument("--n-max", type=int, default=4000)
    p.add_argument("--n-step", type=int, default=100)
    p.add_argument("--target", type=float, help="print pages needed for this probability")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_prob)

    p = sub.add_parser("baitsim", help="bait-page placement simulation (CSV)")
    p.add_argument("--demand", type=int, default=30, help="victim pages before the target")
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--b-min", type=int, default=0)
    p.add_argument("--b-max", type=int, default=60)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_baitsim)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with np.errstate(over="ignore"):
            return args.func(args)
    except CliError as exc:
        print(f"retflip: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"retflip: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"retflip: {exc}", file=sys.stderr)
        return EXIT_FIXTURE
    except (ValueError, OverflowError) as exc:
        print(f"retflip: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssertionError as exc:
        print(f"retflip: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
