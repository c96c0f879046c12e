"""Fault simulation on stored return addresses and outcome classification."""

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _core as core
from .analysis import (
    DiffSet,
    candidates_exhaustive_offset,
    candidates_matched,
    diff_traces,
)
from .isa import OP_LOAD, OP_POP, OP_RET, OP_STORE, OP_SYS, SYS_READ, decode
from .tracer import trace as run_trace
from .vm import DEFAULT_BUDGET, DEFAULT_STACK_PAGES, TERMINATION_KINDS, Executor, load, step

DIRECT_JUMP = "direct_jump"
MEMORY_CORRUPTION = "memory_corruption"
MODES = (DIRECT_JUMP, MEMORY_CORRUPTION)
_MODE_CODE = {DIRECT_JUMP: core.INJ_DIRECT, MEMORY_CORRUPTION: core.INJ_MEMORY}

BENIGN = "benign"
EXPLOIT_LABELS = ("misauthentication", "plaintext_leak", "misclassification")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class Injection:
    pair: object  # AddressPair
    occurrence: int = 0
    mode: str = DIRECT_JUMP

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown injection mode {self.mode!r}")
        if self.occurrence < 0:
            raise ValueError("occurrence must be >= 0")


@dataclass(frozen=True)
class FaultOutcome:
    injection: Injection
    fired: bool
    diverted: bool
    result: object  # ExecutionResult
    matched_correct_trace: int = None

    @property
    def instructions_executed(self):
        return self.result.instructions_executed


# -- classification -------------------------------------------------------

_COND_RE = re.compile(
    r'^(exit)\s*(==|!=)\s*(-?\d+)$'
    r'|^(stdout|stderr)\s+(contains|lacks)\s+"((?:[^"\\]|\\.)*)"$'
    r'|^(termination)\s*(==|in)\s*([a-z_,\s]+)$'
    r'|^(always)$')


@dataclass(frozen=True)
class Condition:
    subject: str  # exit | stdout | stderr | termination | always
    op: str
    value: object = None

    def holds(self, result):
        if self.subject == "always":
            return True
        if self.subject == "exit":
            code = result.exit_code
            if self.op == "==":
                return code == self.value
            return code != self.value
        if self.subject in ("stdout", "stderr"):
            stream = result.stdout if self.subject == "stdout" else result.stderr
            found = self.value in stream
            return found if self.op == "contains" else not found
        return result.termination.kind in self.value

    def __str__(self):
        if self.subject == "always":
            return "always"
        if self.subject in ("stdout", "stderr"):
            text = self.value.decode("latin-1").replace("\\", "\\\\").replace('"', '\\"')
            return f'{self.subject} {self.op} "{text}"'
        if self.subject == "termination":
            return f"termination in {','.join(self.value)}"
        return f"exit {self.op} {self.value}"


@dataclass(frozen=True)
class ClassificationRule:
    label: str
    conditions: tuple = ()

    def matches(self, result):
        return all(c.holds(result) for c in self.conditions)

    def __str__(self):
        conds = " and ".join(str(c) for c in self.conditions) or "always"
        return f"rule {self.label}: {conds}"


DEFAULT_RULE = ClassificationRule(BENIGN, (Condition("always", "always"),))


def parse_condition(text):
    m = _COND_RE.match(text.strip())
    if not m:
        raise ValueError(f"bad rule condition {text!r}")
    g = m.groups()
    if g[0]:
        return Condition("exit", g[1], int(g[2]))
    if g[3]:
        raw = g[5].encode("latin-1").decode("unicode_escape").encode("latin-1")
        return Condition(g[3], g[4], raw)
    if g[6]:
        kinds = tuple(k.strip() for k in g[8].split(",") if k.strip())
        for k in kinds:
            if k not in TERMINATION_KINDS:
                raise ValueError(f"unknown termination kind {k!r}")
        if g[7] == "==" and len(kinds) != 1:
            raise ValueError("termination == takes exactly one kind")
        return Condition("termination", "in", kinds)
    return Condition("always", "always")


def parse_rule(text):
    """Parse ``rule LABEL: COND [and COND ...]``."""
    m = re.match(r"^\s*rule\s+([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(.+)$", text)
    if not m:
        raise ValueError(f"bad rule {text!r}")
    parts = re.split(r'\s+and\s+(?=(?:[^"]*"[^"]*")*[^"]*$)', m.group(2).strip())
    return ClassificationRule(m.group(1), tuple(parse_condition(p) for p in parts))


def parse_rules(lines):
    rules = [parse_rule(ln) for ln in lines if ln.strip() and not ln.strip().startswith(";")]
    return rules


def standard_rules(exploits=()):
    """``exploits`` first, then crash and hang, then the benign default."""
    return list(exploits) + [
        parse_rule("rule crash: termination in invalid_instruction,memory_fault,stack_fault"),
        parse_rule("rule hang: termination == budget_exhausted"),
    ]


def classify(outcome, rules):
    """Label of the first rule matching the outcome's result; benign otherwise."""
    if not rules:
        raise ValueError("rules must be non-empty")
    result = getattr(outcome, "result", outcome)
    for rule in list(rules) + [DEFAULT_RULE]:
        if rule.matches(result):
            return rule.label
    raise AssertionError("default rule must match")


# -- injection -------------------------------------------------------------

def inject_and_run(program, input, seed, budget, injection, correct_addresses=None,
                   degradation=1, stack_pages=DEFAULT_STACK_PAGES):
    """Re-execute with one corrupted return address.

    direct_jump: when the ``occurrence``-th call returning to ``addr_src``
    executes its RET, control goes to ``addr_dest`` instead. memory_corruption:
    the stored slot is xored with the pair mask as the call pushes it.
    """
    pair = injection.pair
    state, _ = load(program, seed, stack_pages, input)
    ex = Executor(state, budget=budget, degradation=degradation,
                  visited=correct_addresses is not None,
                  injection=(_MODE_CODE[injection.mode], pair.addr_src, pair.mask,
                             injection.occurrence))
    ex.resume()
    matched = None
    if correct_addresses is not None:
        hit = np.flatnonzero(ex.visited).astype(np.uint64) + np.uint64(state.layout.code_base)
        matched = int(np.intersect1d(hit, correct_addresses, assume_unique=True).size)
    return FaultOutcome(injection, ex.fired, ex.diverted, state.result(), matched)


def sweep_occurrences(program, input, seed, budget, pair, mode=DIRECT_JUMP, baseline=None,
                      correct_addresses=None, degradation=1):
    """Outcomes for occurrences 0..N where N is the pair's dynamic call count."""
    if baseline is None:
        baseline = run_trace(program, input, seed, budget, degradation)
    n = baseline.occurrences(pair.addr_src)
    return [inject_and_run(program, input, seed, budget, Injection(pair, k, mode),
                           correct_addresses, degradation)
            for k in range(n + 1)]


def slot_touches(program, input=b"", seed=0, budget=DEFAULT_BUDGET):
    """Instructions that read or write a live return-address slot other than its RET.

    Returns a list of (tick, address, reason). An empty list means direct-jump
    and memory-corruption injection cannot diverge on this input.
    """
    state, layout = load(program, seed, DEFAULT_STACK_PAGES, input)
    kinds = []  # stack of (slot, is_return_address)
    touches = []
    lo, top = layout.stack_bottom, layout.stack_base
    while not state.terminated and state.tick < budget:
        pc, sp = state.pc, state.sp
        try:
            insn = decode(state.memory_window(pc), 0)
        except Exception:
            insn = None
        regs = [int(r) for r in state.regs]
        ev = step(state)
        if ev.termination is not None and ev.addr is None:
            break
        op = insn.opcode
        if op == OP_POP and kinds and kinds[-1][1]:
            touches.append((state.tick, pc, "pop of a return address"))
        if op in (OP_RET, OP_POP) and kinds:
            kinds.pop()
        elif ev.is_call:
            kinds.append((sp - 8, True))
        elif op == 0x40:
            kinds.append((sp - 8, False))
        if op in (OP_LOAD, OP_STORE):
            base = regs[insn.b] if op == OP_LOAD else regs[insn.a]
            addr = (base + insn.imm) & 0xFFFFFFFFFFFFFFFF
            for slot, is_ret in kinds:
                if is_ret and addr < slot + 8 and slot < addr + 8:
                    touches.append((state.tick, pc, "load/store on a return slot"))
        if op == OP_SYS and insn.a == SYS_READ and lo <= regs[1] < top:
            touches.append((state.tick, pc, "read into the stack"))
    return touches


# -- end-to-end scan ---------------------------------------------------------

@dataclass
class ScanSettings:
    candidate_mode: str = "matched"  # matched | exhaustive_offset
    d: int = 1
    low_bits_only: bool = False
    step2: bool = False
    rules: list = field(default_factory=lambda: standard_rules())
    budget: int = DEFAULT_BUDGET
    degradation: int = 1
    seed: int = 0
    workers: int = 1
    mode: str = DIRECT_JUMP
    timing: bool = True


@dataclass
class ScanResult:
    correct_trace: object
    incorrect_trace: object
    diff: object
    candidates: list
    outcomes: list
    labels: list
    baseline_label: str
    gadgets: list  # (pair, label, occurrences)

    def gadget_set(self, labels=None):
        return {(p.addr_src, p.addr_dest) for p, lab, _ in self.gadgets
                if labels is None or lab in labels}

    def label_counts(self):
        counts = {}
        for _, lab, _ in self.gadgets:
            counts[lab] = counts.get(lab, 0) + 1
        return dict(sorted(counts.items()))


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def find_candidates(correct, incorrect, settings):
    """Candidate pairs for the scan; return addresses come from the incorrect run."""
    diff = _stage("diff", diff_traces, correct, incorrect) if settings.step2 else None
    if settings.candidate_mode == "exhaustive_offset":
        cands = candidates_exhaustive_offset(incorrect)
        if diff is not None:
            cands = [p for p in cands if p.addr_dest in diff]
    elif settings.candidate_mode == "matched":
        if diff is not None:
            targets = diff
        else:
            targets = DiffSet(frozenset(np.union1d(correct.addresses(),
                                                   incorrect.addresses()).tolist()))
        cands = candidates_matched(incorrect, targets, settings.d, settings.low_bits_only,
                                   settings.workers)
    else:
        raise ValueError(f"unknown candidate mode {settings.candidate_mode!r}")
    return diff, cands


def scan(program, correct_input, incorrect_input, settings):
    """Trace both inputs, generate candidates, sweep occurrences, classify."""
    s = settings
    correct = _stage("trace", run_trace, program, correct_input, s.seed, s.budget, s.degradation)
    incorrect = _stage("trace", run_trace, program, incorrect_input, s.seed, s.budget,
                       s.degradation)
    diff, cands = _stage("candidates", find_candidates, correct, incorrect, s)
    correct_addrs = correct.addresses()
    baseline_label = classify(incorrect.result, s.rules)

    jobs = [(p, k) for p in cands for k in range(incorrect.occurrences(p.addr_src) + 1)]

    def work(job):
        pair, k = job
        return inject_and_run(program, incorrect_input, s.seed, s.budget,
                              Injection(pair, k, s.mode), correct_addrs, s.degradation)

    if s.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=s.workers) as pool:
            outcomes = _stage("simulate", lambda: list(pool.map(work, jobs)))
    else:
        outcomes = _stage("simulate", lambda: [work(j) for j in jobs])
    labels = [classify(o, s.rules) for o in outcomes]

    found = {}
    for o, lab in zip(outcomes, labels):
        # a gadget changes the outcome class of the unfaulted run
        if lab == BENIGN or lab == baseline_label:
            continue
        found.setdefault((o.injection.pair.key, lab), (o.injection.pair, []))[1].append(
            o.injection.occurrence)
    gadgets = [(pair, lab, occ) for (_, lab), (pair, occ) in sorted(found.items())]
    return ScanResult(correct, incorrect, diff, cands, outcomes, labels, baseline_label, gadgets)
