"""Instrumented execution: instruction traces, function timings, trace files."""

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import _core as core
from .isa import MNEMONIC_TO_OPCODE, MNEMONICS, OP_CALL
from .vm import (
    DEFAULT_BUDGET,
    DEFAULT_STACK_PAGES,
    EXITED,
    TERMINATION_KINDS,
    ExecutionResult,
    Executor,
    LoadLayout,
    Termination,
    load,
)

TRACE_MAGIC = "LFTRACE1"


class TraceFormatError(ValueError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class TraceRecord:
    seq: int
    addr: int
    len: int
    mnemonic: str
    is_call: bool
    return_addr: int = None
    tick: int = None


class Trace:
    """Column-oriented instruction trace.

    ``addr``, ``length``, ``opcode``, ``tick`` and ``seq`` are parallel numpy
    arrays; ``records`` materializes TraceRecord objects on demand.
    """

    def __init__(self, addr, length, opcode, tick=None, seq=None, result=None, layout=None):
        self.addr = np.asarray(addr, dtype=np.uint64)
        self.length = np.asarray(length, dtype=np.uint64)
        self.opcode = np.asarray(opcode, dtype=np.uint8)
        n = len(self.addr)
        self.tick = None if tick is None else np.asarray(tick, dtype=np.uint64)
        self.seq = np.arange(n, dtype=np.int64) if seq is None else np.asarray(seq, dtype=np.int64)
        self.result = result
        self.layout = layout
        if not (len(self.length) == len(self.opcode) == len(self.seq) == n):
            raise ValueError("trace columns differ in length")
        if n > 1 and np.any(np.diff(self.seq) <= 0):
            raise ValueError("trace seq numbers must be strictly increasing")

    @property
    def n_instructions(self):
        return len(self.addr)

    @property
    def is_call(self):
        return self.opcode == OP_CALL

    @property
    def m_calls(self):
        return int(np.count_nonzero(self.is_call))

    @property
    def return_addrs(self):
        """Return address of every call record, in execution order."""
        mask = self.is_call
        return self.addr[mask] + self.length[mask]

    @property
    def call_seqs(self):
        return self.seq[self.is_call]

    def addresses(self):
        """Unique executed instruction addresses as a sorted uint64 array."""
        return np.unique(self.addr)

    def occurrences(self, return_addr):
        """Number of dynamic calls whose return address is ``return_addr``."""
        return int(np.count_nonzero(self.return_addrs == np.uint64(return_addr)))

    @property
    def records(self):
        out = []
        for i in range(len(self.addr)):
            a, n, op = int(self.addr[i]), int(self.length[i]), int(self.opcode[i])
            call = op == OP_CALL
            out.append(TraceRecord(int(self.seq[i]), a, n, MNEMONICS[op], call,
                                   a + n if call else None,
                                   None if self.tick is None else int(self.tick[i])))
        return out

    def __len__(self):
        return len(self.addr)

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        same_tick = (self.tick is None and other.tick is None) or (
            self.tick is not None and other.tick is not None and np.array_equal(self.tick, other.tick))
        return (np.array_equal(self.addr, other.addr)
                and np.array_equal(self.length, other.length)
                and np.array_equal(self.opcode, other.opcode)
                and np.array_equal(self.seq, other.seq)
                and same_tick and self.result == other.result and self.layout == other.layout)

    __hash__ = None


@dataclass(frozen=True)
class FunctionTiming:
    symbol: str
    enter_tick: int
    exit_tick: int
    duration: int
    returned: bool = True


class Timings(list):
    """FunctionTiming records plus the ticks of RETs that had no open call."""

    def __init__(self, items=(), unmatched_returns=()):
        super().__init__(items)
        self.unmatched_returns = list(unmatched_returns)


def trace(program, input=b"", seed=0, budget=DEFAULT_BUDGET, degradation=1,
          stack_pages=DEFAULT_STACK_PAGES):
    """Execute ``program`` recording every instruction."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    state, layout = load(program, seed, stack_pages, input)
    ex = Executor(state, budget=budget, degradation=degradation, trace=True)
    ex.resume()
    rows = ex.trace_rows()
    return Trace(rows[:, 0].copy(), rows[:, 1].copy(), rows[:, 2].astype(np.uint8),
                 rows[:, 3].copy(), result=state.result(), layout=layout)


def _symbol_for(program, layout, target):
    off = target - layout.code_base
    name = program.symbol_at(off) if 0 <= off < len(program.image) else None
    return name if name is not None else f"{target:#x}"


def function_timings(program, input=b"", seed=0, budget=DEFAULT_BUDGET, degradation=1,
                     stack_pages=DEFAULT_STACK_PAGES):
    """Per-dynamic-call durations from call/ret events, matched by depth."""
    state, layout = load(program, seed, stack_pages, input)
    ex = Executor(state, budget=budget, degradation=degradation, events=True)
    ex.resume()
    open_calls = []
    done = []
    unmatched = []
    for kind, tick, addr in ex.event_rows().tolist():
        if kind == core.EV_CALL:
            open_calls.append((len(done), _symbol_for(program, layout, addr), tick))
            done.append(None)
        elif open_calls:
            slot, sym, enter = open_calls.pop()
            done[slot] = FunctionTiming(sym, enter, tick, tick - enter)
        else:
            unmatched.append(tick)
    end = state.tick
    for slot, sym, enter in open_calls:
        done[slot] = FunctionTiming(sym, enter, end, end - enter, returned=False)
    return Timings(done, unmatched)


def leaf_timings(timings):
    """Calls that contain no other call."""
    ordered = sorted(timings, key=lambda t: (t.enter_tick, -t.exit_tick))
    leaves = []
    for i, t in enumerate(ordered):
        nxt = ordered[i + 1] if i + 1 < len(ordered) else None
        if nxt is None or not (t.enter_tick <= nxt.enter_tick and nxt.exit_tick <= t.exit_tick):
            leaves.append(t)
    return leaves


def timings_csv(timings):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["symbol", "enter_tick", "exit_tick", "duration"])
    for t in timings:
        w.writerow([t.symbol, t.enter_tick, t.exit_tick, t.duration])
    return buf.getvalue()


def _format_result(res):
    term = res.termination
    head = term.kind
    if term.kind == EXITED:
        head += f" {term.code}"
    elif term.addr is not None:
        head += f" {term.addr:#x}"
    return f"@result {head} ticks={res.ticks} instructions={res.instructions_executed}"


def emit_trace(tr):
    """Serialize to the canonical LFTRACE1 text form."""
    out = [TRACE_MAGIC]
    if tr.layout is not None:
        lay = tr.layout
        out.append(f"@layout seed={lay.aslr_seed} code_base={lay.code_base:#x} "
                   f"stack_base={lay.stack_base:#x} stack_pages={lay.stack_pages}")
    if tr.result is not None:
        out.append(_format_result(tr.result))
        out.append(f"@stdout {tr.result.stdout.hex()}")
        out.append(f"@stderr {tr.result.stderr.hex()}")
    addr = tr.addr.tolist()
    length = tr.length.tolist()
    opcode = tr.opcode.tolist()
    seq = tr.seq.tolist()
    tick = tr.tick.tolist() if tr.tick is not None else None
    for i in range(len(addr)):
        line = f"{seq[i]} {addr[i]:#x} {length[i]} {MNEMONICS[opcode[i]]}"
        if opcode[i] == OP_CALL:
            line += f" ret={addr[i] + length[i]:#x}"
        if tick is not None:
            line += f" tick={tick[i]}"
        out.append(line)
    return "\n".join(out) + "\n"


def _parse_meta(line, lineno):
    key, _, rest = line.partition(" ")
    fields = dict(f.split("=", 1) for f in rest.split() if "=" in f)
    return key, rest, fields


def parse_trace(stream):
    """Parse LFTRACE1 text (a string or a file-like object)."""
    text = stream if isinstance(stream, str) else stream.read()
    lines = text.splitlines()
    if not lines or lines[0] != TRACE_MAGIC:
        raise TraceFormatError(1, f"missing {TRACE_MAGIC} header")
    layout = None
    head = None
    streams = {"@stdout": b"", "@stderr": b""}
    seq, addr, length, opcode, ticks = [], [], [], [], []
    has_tick = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        if line.startswith("@"):
            try:
                key, rest, fields = _parse_meta(line, lineno)
                if key == "@layout":
                    layout = LoadLayout(int(fields["seed"]), int(fields["code_base"], 16),
                                        int(fields["stack_base"], 16), int(fields["stack_pages"]))
                elif key == "@result":
                    parts = rest.split()
                    kind = parts[0]
                    if kind not in TERMINATION_KINDS:
                        raise ValueError(f"unknown termination {kind!r}")
                    code = faddr = None
                    if kind == EXITED:
                        code = int(parts[1])
                    elif len(parts) > 1 and not parts[1].startswith("ticks="):
                        faddr = int(parts[1], 16)
                    head = (Termination(kind, code, faddr), int(fields["ticks"]),
                            int(fields["instructions"]))
                elif key in streams:
                    streams[key] = bytes.fromhex(rest.strip())
                else:
                    raise ValueError(f"unknown metadata {key}")
            except (KeyError, ValueError, IndexError) as exc:
                raise TraceFormatError(lineno, f"bad metadata: {exc}") from None
            continue
        parts = line.split(" ")
        if len(parts) < 4 or any(p == "" for p in parts):
            raise TraceFormatError(lineno, f"malformed record {line!r}")
        try:
            s, a, n = int(parts[0]), int(parts[1], 16), int(parts[2])
        except ValueError:
            raise TraceFormatError(lineno, f"malformed record {line!r}") from None
        if not parts[1].startswith("0x"):
            raise TraceFormatError(lineno, "address must be 0x-prefixed hex")
        mnem = parts[3]
        if mnem not in MNEMONIC_TO_OPCODE:
            raise TraceFormatError(lineno, f"unknown mnemonic {mnem!r}")
        op = MNEMONIC_TO_OPCODE[mnem]
        ret = tk = None
        for extra in parts[4:]:
            if extra.startswith("ret="):
                ret = int(extra[4:], 16)
            elif extra.startswith("tick="):
                tk = int(extra[5:])
            else:
                raise TraceFormatError(lineno, f"unknown field {extra!r}")
        if op == OP_CALL:
            if ret is None:
                raise TraceFormatError(lineno, "call record lacks ret field")
            if ret != a + n:
                raise TraceFormatError(lineno, "ret field must equal addr + len")
        elif ret is not None:
            raise TraceFormatError(lineno, "ret field on a non-call record")
        if has_tick is None:
            has_tick = tk is not None
        elif has_tick != (tk is not None):
            raise TraceFormatError(lineno, "tick field present on some records only")
        if seq and s <= seq[-1]:
            raise TraceFormatError(lineno, "seq not strictly increasing")
        seq.append(s)
        addr.append(a)
        length.append(n)
        opcode.append(op)
        ticks.append(tk)
    result = None
    if head is not None:
        term, nticks, ninsn = head
        result = ExecutionResult(term, nticks, ninsn, streams["@stdout"], streams["@stderr"])
    return Trace(np.array(addr, dtype=np.uint64), np.array(length, dtype=np.uint64),
                 np.array(opcode, dtype=np.uint8),
                 np.array(ticks, dtype=np.uint64) if has_tick else None,
                 np.array(seq, dtype=np.int64), result=result, layout=layout)
