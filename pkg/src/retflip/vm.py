"""Toy 64-bit machine: program images, loading under ASLR, stepping, running.

The CALL instruction pushes the address of the following instruction on a
downward-growing stack; RET pops it back into the program counter. That
stored return address is the value the rest of the package attacks.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _core as core
from .isa import MNEMONICS, OP_CALL, OPCODE_LENGTH, PAGE_SIZE

DEFAULT_BASE = 0x555555554000
DEFAULT_STACK_TOP = 0x7FFFFFFFF000
DEFAULT_STACK_PAGES = 16
DEFAULT_BUDGET = 1_000_000
ASLR_PAGES = 1 << 16
MAX_LAYOUT_ATTEMPTS = 64
BASE_REG = 7  # the loader leaves code_base in r7

EXITED = "exited"
INVALID_INSTRUCTION = "invalid_instruction"
MEMORY_FAULT = "memory_fault"
STACK_FAULT = "stack_fault"
BUDGET_EXHAUSTED = "budget_exhausted"
TERMINATION_KINDS = (EXITED, INVALID_INSTRUCTION, MEMORY_FAULT, STACK_FAULT, BUDGET_EXHAUSTED)

_STATUS_KIND = {
    core.ST_EXITED: EXITED,
    core.ST_INVALID: INVALID_INSTRUCTION,
    core.ST_MEMFAULT: MEMORY_FAULT,
    core.ST_STACKFAULT: STACK_FAULT,
    core.ST_BUDGET: BUDGET_EXHAUSTED,
}


class LayoutError(RuntimeError):
    pass


@dataclass
class Program:
    image: bytes
    base_addr_canonical: int = DEFAULT_BASE
    entry_offset: int = 0
    symbols: dict = field(default_factory=dict)
    data_segments: list = field(default_factory=list)

    def __post_init__(self):
        self.image = bytes(self.image)
        if not self.image:
            raise ValueError("empty program image")
        if self.base_addr_canonical % PAGE_SIZE:
            raise ValueError(f"base address {self.base_addr_canonical:#x} is not page aligned")
        if not 0 <= self.entry_offset < len(self.image):
            raise ValueError(f"entry offset {self.entry_offset:#x} outside image")
        for name, off in self.symbols.items():
            if not 0 <= off < len(self.image):
                raise ValueError(f"symbol {name!r} offset {off:#x} outside image")

    @property
    def code_end(self):
        """Offset where the instruction stream stops and data begins."""
        if self.data_segments:
            return min(off for off, _ in self.data_segments)
        return len(self.image)

    @property
    def code_pages(self):
        return -(-len(self.image) // PAGE_SIZE)

    def symbol_at(self, offset):
        for name, off in sorted(self.symbols.items(), key=lambda kv: kv[1]):
            if off == offset:
                return name
        return None


@dataclass(frozen=True)
class LoadLayout:
    aslr_seed: int
    code_base: int
    stack_base: int
    stack_pages: int

    @property
    def stack_bottom(self):
        return self.stack_base - self.stack_pages * PAGE_SIZE


@dataclass(frozen=True)
class Termination:
    kind: str
    code: int = None
    addr: int = None

    def __str__(self):
        if self.kind == EXITED:
            return f"exited({self.code})"
        if self.addr is not None:
            return f"{self.kind}({self.addr:#x})"
        return self.kind


@dataclass(frozen=True)
class ExecutionResult:
    termination: Termination
    ticks: int
    instructions_executed: int
    stdout: bytes = b""
    stderr: bytes = b""

    @property
    def exit_code(self):
        return self.termination.code if self.termination.kind == EXITED else None


@dataclass(frozen=True)
class StepEvent:
    """One executed instruction, or the termination that stopped the machine."""

    addr: int = None
    length: int = None
    mnemonic: str = None
    is_call: bool = False
    return_addr: int = None
    tick: int = None
    termination: Termination = None


def draw_layout(program, seed, stack_pages=DEFAULT_STACK_PAGES):
    """Randomize code and stack placement; page offsets are preserved."""
    if stack_pages < 1:
        raise ValueError("stack_pages must be >= 1")
    rng = np.random.default_rng(seed)
    code_len = program.code_pages * PAGE_SIZE
    for _ in range(MAX_LAYOUT_ATTEMPTS):
        u, v = (int(x) for x in rng.integers(0, ASLR_PAGES, size=2))
        code_base = program.base_addr_canonical + PAGE_SIZE * u
        stack_base = DEFAULT_STACK_TOP - PAGE_SIZE * v
        stack_lo = stack_base - stack_pages * PAGE_SIZE
        if code_base + code_len <= stack_lo or stack_base <= code_base:
            return LoadLayout(int(seed), code_base, stack_base, stack_pages)
    raise LayoutError(f"no collision-free layout after {MAX_LAYOUT_ATTEMPTS} draws")


class MachineState:
    """Registers, flags, paged memory, tick counter and output streams."""

    def __init__(self, program, layout, input=b""):
        self.program = program
        self.layout = layout
        self.regs = np.zeros(8, dtype=np.uint64)
        self.ctl = np.zeros(core.N_CTL, dtype=np.uint64)
        self.cfg = np.zeros(core.N_CFG, dtype=np.uint64)
        self.cmem = np.zeros(program.code_pages * PAGE_SIZE, dtype=np.uint8)
        self.cmem[: len(program.image)] = np.frombuffer(program.image, dtype=np.uint8)
        self.smem = np.zeros(layout.stack_pages * PAGE_SIZE, dtype=np.uint8)
        self.input = np.frombuffer(bytes(input), dtype=np.uint8).copy()
        self.out = np.zeros(256, dtype=np.uint8)
        self.err = np.zeros(256, dtype=np.uint8)
        self.regs[BASE_REG] = layout.code_base
        self.ctl[core.C_PC] = layout.code_base + program.entry_offset
        self.ctl[core.C_SP] = layout.stack_base
        self.cfg[core.G_CODE_BASE] = layout.code_base
        self.cfg[core.G_STACK_TOP] = layout.stack_base
        self.cfg[core.G_DEGR] = 1
        self.cfg[core.G_BUDGET] = core.NO_STOP
        self.cfg[core.G_STOP] = core.NO_STOP
        self.cfg[core.G_MAXSTEPS] = core.NO_STOP
        self.cfg[core.G_WIN_VAL] = core.NO_STOP

    pc = property(lambda self: int(self.ctl[core.C_PC]))
    sp = property(lambda self: int(self.ctl[core.C_SP]))
    zflag = property(lambda self: bool(self.ctl[core.C_Z]))
    tick = property(lambda self: int(self.ctl[core.C_TICK]))
    instructions_executed = property(lambda self: int(self.ctl[core.C_ICOUNT]))
    input_cursor = property(lambda self: int(self.ctl[core.C_INPOS]))

    @property
    def stdout_buf(self):
        return self.out[: int(self.ctl[core.C_OUTLEN])].tobytes()

    @property
    def stderr_buf(self):
        return self.err[: int(self.ctl[core.C_ERRLEN])].tobytes()

    @property
    def terminated(self):
        return int(self.ctl[core.C_STATUS]) != core.ST_RUNNING

    @property
    def memory(self):
        """Sparse page map: page address -> 4096 bytes."""
        pages = {}
        for base, mem in ((self.layout.code_base, self.cmem), (self.layout.stack_bottom, self.smem)):
            for k in range(len(mem) // PAGE_SIZE):
                pages[base + k * PAGE_SIZE] = mem[k * PAGE_SIZE:(k + 1) * PAGE_SIZE].tobytes()
        return pages

    def read_u64(self, addr):
        region, off = core._locate(self.cfg, len(self.cmem), len(self.smem), np.uint64(addr), 8)
        if region == 0:
            raise IndexError(f"unmapped address {addr:#x}")
        mem = self.cmem if region == 1 else self.smem
        return int.from_bytes(mem[off:off + 8].tobytes(), "little")

    def memory_window(self, addr, n=16):
        """Up to ``n`` mapped bytes starting at ``addr`` (fewer at a region end)."""
        for base, mem in ((self.layout.code_base, self.cmem), (self.layout.stack_bottom, self.smem)):
            if base <= addr < base + len(mem):
                off = addr - base
                return mem[off:off + n].tobytes()
        raise IndexError(f"unmapped address {addr:#x}")

    def stack_words(self):
        """Live stack words from sp up to stack_base, as {address: value}."""
        lo = self.layout.stack_bottom
        raw = self.smem[self.sp - lo:].view("<u8")
        return {self.sp + 8 * i: int(v) for i, v in enumerate(raw)}

    def termination(self):
        status = int(self.ctl[core.C_STATUS])
        kind = _STATUS_KIND[status]
        if kind == EXITED:
            return Termination(EXITED, code=int(self.ctl[core.C_EXIT]))
        if kind in (INVALID_INSTRUCTION, MEMORY_FAULT):
            return Termination(kind, addr=int(self.ctl[core.C_FAULT_ADDR]))
        return Termination(kind)

    def result(self):
        return ExecutionResult(
            termination=self.termination(),
            ticks=self.tick,
            instructions_executed=self.instructions_executed,
            stdout=self.stdout_buf,
            stderr=self.stderr_buf,
        )

    def copy(self):
        other = object.__new__(MachineState)
        other.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                               for k, v in self.__dict__.items()})
        return other

    def __eq__(self, other):
        if not isinstance(other, MachineState):
            return NotImplemented
        arrays = ("regs", "ctl", "cfg", "cmem", "smem", "input")
        return (self.layout == other.layout
                and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and self.stdout_buf == other.stdout_buf
                and self.stderr_buf == other.stderr_buf)

    __hash__ = None


class Executor:
    """Drives the kernel over a MachineState, servicing buffer growth.

    Instrumentation is opt-in: per-instruction records (``trace``), call/ret
    events (``events``), tick windows during which ``watch`` sits on the live
    stack (``windows``), and a per-byte visited map of the code region.
    """

    def __init__(self, state, *, budget=None, degradation=1, trace=False, events=False,
                 watch=None, visited=False, injection=None):
        if int(degradation) != degradation or degradation < 1:
            raise ValueError("degradation must be an integer >= 1")
        self.state = state
        cfg = state.cfg
        cfg[core.G_BUDGET] = core.NO_STOP if budget is None else int(budget)
        cfg[core.G_DEGR] = int(degradation)
        flags = 0
        self.trace = np.zeros((4096 if trace else 0, 4), dtype=np.uint64)
        self.events = np.zeros((256 if events else 0, 3), dtype=np.uint64)
        self.windows = np.zeros((16 if watch is not None else 0, 3), dtype=np.uint64)
        self.visited = np.zeros(len(state.cmem) if visited else 0, dtype=np.uint8)
        if trace:
            flags |= core.F_TRACE
        if events:
            flags |= core.F_EVENTS
        if watch is not None:
            flags |= core.F_WINDOWS
            cfg[core.G_WIN_VAL] = int(watch)
            count, first = core._count_live(state.smem, state.sp - state.layout.stack_bottom,
                                            np.uint64(watch))
            if count:
                core._window_update(state.ctl, cfg, self.windows, count,
                                    np.uint64(state.layout.stack_bottom + first))
        if visited:
            flags |= core.F_VISITED
        cfg[core.G_FLAGS] = flags
        if injection is not None:
            mode, src, mask, occurrence = injection
            cfg[core.G_INJ_MODE] = mode
            cfg[core.G_INJ_SRC] = src
            cfg[core.G_INJ_MASK] = mask
            cfg[core.G_INJ_OCC] = occurrence

    def resume(self, stop_tick=None, max_steps=None):
        """Run until termination, ``stop_tick`` or ``max_steps``; returns the pause reason."""
        st = self.state
        st.cfg[core.G_STOP] = core.NO_STOP if stop_tick is None else int(stop_tick)
        st.cfg[core.G_MAXSTEPS] = core.NO_STOP if max_steps is None else int(max_steps)
        with np.errstate(over="ignore"):
            while True:
                reason = core.execute(st.regs, st.ctl, st.cfg, st.cmem, st.smem, st.input,
                                      st.out, st.err, self.trace, self.events, self.windows,
                                      self.visited, OPCODE_LENGTH)
                if reason == core.R_TRACE_FULL:
                    self.trace = _grow(self.trace)
                elif reason == core.R_EVENTS_FULL:
                    self.events = _grow(self.events)
                elif reason == core.R_WINDOWS_FULL:
                    self.windows = _grow(self.windows)
                elif reason == core.R_STREAM_FULL:
                    need = int(st.regs[2])
                    st.out = _grow_bytes(st.out, int(st.ctl[core.C_OUTLEN]) + need)
                    st.err = _grow_bytes(st.err, int(st.ctl[core.C_ERRLEN]) + need)
                else:
                    return reason

    def trace_rows(self):
        return self.trace[: int(self.state.ctl[core.C_TCOUNT])]

    def event_rows(self):
        return self.events[: int(self.state.ctl[core.C_ECOUNT])]

    def window_rows(self):
        return self.windows[: int(self.state.ctl[core.C_WCOUNT])]

    @property
    def fired(self):
        return bool(self.state.ctl[core.C_FIRED])

    @property
    def diverted(self):
        return bool(self.state.ctl[core.C_DIVERTED])


def _grow(buf):
    out = np.zeros((max(2 * buf.shape[0], 16), buf.shape[1]), dtype=buf.dtype)
    out[: buf.shape[0]] = buf
    return out


def _grow_bytes(buf, need):
    if need <= len(buf):
        return buf
    out = np.zeros(max(2 * len(buf), need), dtype=buf.dtype)
    out[: len(buf)] = buf
    return out


def load(program, seed=0, stack_pages=DEFAULT_STACK_PAGES, input=b""):
    """Map ``program`` under the layout drawn from ``seed``."""
    layout = draw_layout(program, seed, stack_pages)
    return MachineState(program, layout, input), layout


def step(state):
    """Execute one instruction of ``state`` in place and describe it."""
    if state.terminated:
        raise RuntimeError("machine already terminated")
    ex = Executor(state)
    before = state.instructions_executed
    ex.resume(max_steps=1)
    if state.instructions_executed == before:
        return StepEvent(termination=state.termination())
    op = int(state.ctl[core.C_LAST_OP])
    addr = int(state.ctl[core.C_LAST_ADDR])
    length = int(state.ctl[core.C_LAST_LEN])
    is_call = op == OP_CALL
    return StepEvent(addr=addr, length=length, mnemonic=MNEMONICS[op], is_call=is_call,
                     return_addr=addr + length if is_call else None, tick=state.tick,
                     termination=state.termination() if state.terminated else None)


def run(program, input=b"", seed=0, budget=DEFAULT_BUDGET, degradation=1,
        stack_pages=DEFAULT_STACK_PAGES):
    """Run to termination or until the tick budget is spent."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    state, _ = load(program, seed, stack_pages, input)
    Executor(state, budget=budget, degradation=degradation).resume()
    return state.result()
