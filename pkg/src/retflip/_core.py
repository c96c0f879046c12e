"""Interpreter kernel.

All machine state lives in flat numpy arrays so that the same loop runs
under numba or as plain Python. ``execute`` runs until the machine
terminates or one of the pause conditions fires; the caller inspects the
returned reason, services it (grow a buffer, take a snapshot) and resumes.
"""

import numpy as np

from ._jit import kernel
from .isa import decode_at

# termination status (ctl[C_STATUS])
ST_RUNNING = 0
ST_EXITED = 1
ST_INVALID = 2
ST_MEMFAULT = 3
ST_STACKFAULT = 4
ST_BUDGET = 5

# pause reasons returned by execute()
R_DONE = 0
R_STEPS = 1
R_STOP = 2
R_TRACE_FULL = 3
R_EVENTS_FULL = 4
R_WINDOWS_FULL = 5
R_STREAM_FULL = 6

# ctl slots: mutable machine + instrumentation state
C_PC = 0
C_SP = 1
C_Z = 2
C_TICK = 3
C_ICOUNT = 4
C_STATUS = 5
C_FAULT_ADDR = 6
C_EXIT = 7
C_INPOS = 8
C_OUTLEN = 9
C_ERRLEN = 10
C_TCOUNT = 11
C_ECOUNT = 12
C_INJ_SEEN = 13
C_INJ_SLOT = 14
C_INJ_ARMED = 15
C_FIRED = 16
C_DIVERTED = 17
C_WLIVE = 18
C_WSTART = 19
C_WSLOT = 20
C_WCOUNT = 21
C_LAST_ADDR = 22
C_LAST_LEN = 23
C_LAST_OP = 24
N_CTL = 25

# cfg slots: run parameters
G_CODE_BASE = 0
G_STACK_TOP = 1
G_BUDGET = 2
G_DEGR = 3
G_STOP = 4
G_MAXSTEPS = 5
G_FLAGS = 6
G_INJ_MODE = 7
G_INJ_SRC = 8
G_INJ_MASK = 9
G_INJ_OCC = 10
G_WIN_VAL = 11
N_CFG = 12

F_TRACE = 1
F_EVENTS = 2
F_WINDOWS = 4
F_VISITED = 8

INJ_NONE = 0
INJ_DIRECT = 1
INJ_MEMORY = 2

EV_CALL = 0
EV_RET = 1

NO_STOP = np.uint64(0xFFFFFFFFFFFFFFFF)


@kernel
def _locate(cfg, clen, slen, addr, n):
    """Map ``[addr, addr+n)`` to (region, offset); region 0 means unmapped."""
    cb = cfg[G_CODE_BASE]
    top = cfg[G_STACK_TOP]
    lo = top - np.uint64(slen)
    nn = np.uint64(n)
    if addr > np.uint64(0xFFFFFFFFFFFFFFFF) - nn:
        return 0, 0
    end = addr + nn
    if addr >= cb and end <= cb + np.uint64(clen):
        return 1, np.int64(addr - cb)
    if addr >= lo and end <= top:
        return 2, np.int64(addr - lo)
    return 0, 0


@kernel
def _first_unmapped(cfg, clen, slen, addr, n):
    for k in range(n):
        a = addr + np.uint64(k)
        region, _ = _locate(cfg, clen, slen, a, 1)
        if region == 0:
            return a
    return addr


@kernel
def _get_u64(mem, off):
    v = np.uint64(0)
    for k in range(8):
        v |= np.uint64(mem[off + k]) << np.uint64(8 * k)
    return v


@kernel
def _put_u64(mem, off, v):
    for k in range(8):
        mem[off + k] = np.uint8((v >> np.uint64(8 * k)) & np.uint64(0xFF))


@kernel
def _count_live(smem, sp_off, value):
    count = 0
    first = -1
    off = sp_off
    while off + 8 <= len(smem):
        if _get_u64(smem, off) == value:
            count += 1
            if first < 0:
                first = off
        off += 8
    return count, first


@kernel
def _window_update(ctl, cfg, windows, new_live, slot):
    """Record live-count transitions of the watched value as tick intervals."""
    old = ctl[C_WLIVE]
    tick = ctl[C_TICK]
    if old == 0 and new_live > 0:
        ctl[C_WSTART] = tick
        ctl[C_WSLOT] = slot
    elif old > 0 and new_live == 0:
        if tick > ctl[C_WSTART]:
            w = np.int64(ctl[C_WCOUNT])
            windows[w, 0] = ctl[C_WSTART]
            windows[w, 1] = tick
            windows[w, 2] = ctl[C_WSLOT]
            ctl[C_WCOUNT] = ctl[C_WCOUNT] + np.uint64(1)
    ctl[C_WLIVE] = np.uint64(new_live)


@kernel
def execute(regs, ctl, cfg, cmem, smem, inp, out, err,
            trace, events, windows, visited, lengths):
    """Run the machine; returns a pause reason (R_*)."""
    one = np.uint64(1)
    eight = np.uint64(8)
    clen = len(cmem)
    slen = len(smem)
    top = cfg[G_STACK_TOP]
    lo = top - np.uint64(slen)
    budget = cfg[G_BUDGET]
    degr = cfg[G_DEGR]
    stop = cfg[G_STOP]
    maxsteps = cfg[G_MAXSTEPS]
    flags = np.int64(cfg[G_FLAGS])
    do_trace = (flags & 1) != 0
    do_events = (flags & 2) != 0
    do_windows = (flags & 4) != 0
    do_visited = (flags & 8) != 0
    inj_mode = np.int64(cfg[G_INJ_MODE])
    inj_src = cfg[G_INJ_SRC]
    inj_mask = cfg[G_INJ_MASK]
    inj_occ = cfg[G_INJ_OCC]
    wval = cfg[G_WIN_VAL]
    steps = np.uint64(0)

    while True:
        if ctl[C_STATUS] != 0:
            return R_DONE
        if ctl[C_TICK] >= budget:
            ctl[C_STATUS] = ST_BUDGET
            if do_windows and ctl[C_WLIVE] > 0:
                _window_update(ctl, cfg, windows, 0, np.uint64(0))
            return R_DONE
        if steps >= maxsteps:
            return R_STEPS
        pc = ctl[C_PC]
        sp = ctl[C_SP]

        region, off = _locate(cfg, clen, slen, pc, 1)
        if region == 0:
            ctl[C_STATUS] = ST_MEMFAULT
            ctl[C_FAULT_ADDR] = pc
            return R_DONE
        if region == 1:
            op, length, a, b, imm = decode_at(cmem, off, clen - off, lengths)
        else:
            op, length, a, b, imm = decode_at(smem, off, slen - off, lengths)
        if length == 0:
            ctl[C_STATUS] = ST_INVALID
            ctl[C_FAULT_ADDR] = pc
            return R_DONE
        if length < 0:
            ctl[C_STATUS] = ST_MEMFAULT
            if region == 1:
                ctl[C_FAULT_ADDR] = pc + np.uint64(clen - off)
            else:
                ctl[C_FAULT_ADDR] = pc + np.uint64(slen - off)
            return R_DONE

        cost = degr
        if op == 0x60 and a == 3:
            cost = regs[0]
            if cost > np.uint64(1 << 62):
                cost = np.uint64(1 << 62)
        if ctl[C_TICK] + cost > stop:
            return R_STOP
        if do_trace and ctl[C_TCOUNT] >= np.uint64(trace.shape[0]):
            return R_TRACE_FULL
        if do_events and ctl[C_ECOUNT] >= np.uint64(events.shape[0]):
            return R_EVENTS_FULL
        if do_windows and ctl[C_WCOUNT] >= np.uint64(windows.shape[0]):
            return R_WINDOWS_FULL
        if op == 0x60 and a == 1 and regs[2] < np.uint64(1 << 40):
            n = np.int64(regs[2])
            r, _ = _locate(cfg, clen, slen, regs[1], n)
            if r != 0:
                if regs[0] == np.uint64(1) and np.int64(ctl[C_OUTLEN]) + n > len(out):
                    return R_STREAM_FULL
                if regs[0] == np.uint64(2) and np.int64(ctl[C_ERRLEN]) + n > len(err):
                    return R_STREAM_FULL

        nxt = pc + np.uint64(length)
        new_pc = nxt
        live_delta = 0
        live_slot = np.uint64(0)
        rescan = False
        ev_kind = -1
        ev_addr = np.uint64(0)

        if op == 0x00:
            pass
        elif op == 0x01:
            ctl[C_STATUS] = ST_EXITED
            ctl[C_EXIT] = np.uint64(a)
        elif op == 0x10:
            regs[a] = imm
        elif op == 0x11:
            regs[a] = regs[b]
        elif op == 0x12:
            regs[a] = regs[a] + regs[b]
            ctl[C_Z] = np.uint64(1) if regs[a] == 0 else np.uint64(0)
        elif op == 0x13:
            regs[a] = regs[a] - regs[b]
            ctl[C_Z] = np.uint64(1) if regs[a] == 0 else np.uint64(0)
        elif op == 0x14:
            regs[a] = regs[a] ^ regs[b]
            ctl[C_Z] = np.uint64(1) if regs[a] == 0 else np.uint64(0)
        elif op == 0x15:
            ctl[C_Z] = np.uint64(1) if regs[a] == regs[b] else np.uint64(0)
        elif op == 0x16:
            ctl[C_Z] = np.uint64(1) if regs[a] == imm else np.uint64(0)
        elif op == 0x20:
            new_pc = nxt + imm
        elif op == 0x21:
            if ctl[C_Z] != 0:
                new_pc = nxt + imm
        elif op == 0x22:
            if ctl[C_Z] == 0:
                new_pc = nxt + imm
        elif op == 0x30 or op == 0x40:
            if sp < lo + eight:
                ctl[C_STATUS] = ST_STACKFAULT
                ctl[C_FAULT_ADDR] = sp
                return R_DONE
            if op == 0x30:
                value = nxt
                new_pc = nxt + imm
                ev_kind = 0
                ev_addr = new_pc
            else:
                value = regs[a]
            sp = sp - eight
            soff = np.int64(sp - lo)
            if op == 0x30 and inj_mode != 0 and value == inj_src:
                if ctl[C_INJ_SEEN] == inj_occ:
                    ctl[C_FIRED] = one
                    ctl[C_INJ_ARMED] = one
                    ctl[C_INJ_SLOT] = sp
                    if inj_mode == 2:
                        value = value ^ inj_mask
                ctl[C_INJ_SEEN] = ctl[C_INJ_SEEN] + one
            _put_u64(smem, soff, value)
            if value == wval:
                live_delta = 1
                live_slot = sp
        elif op == 0x31 or op == 0x41:
            if sp > top - eight:
                ctl[C_STATUS] = ST_STACKFAULT
                ctl[C_FAULT_ADDR] = sp
                return R_DONE
            stored = _get_u64(smem, np.int64(sp - lo))
            value = stored
            if ctl[C_INJ_ARMED] != 0 and sp == ctl[C_INJ_SLOT]:
                ctl[C_INJ_ARMED] = 0
                if op == 0x31:
                    if inj_mode == 1 and value == inj_src:
                        value = inj_src ^ inj_mask
                        ctl[C_DIVERTED] = one
                    elif inj_mode == 2 and value == (inj_src ^ inj_mask):
                        ctl[C_DIVERTED] = one
            if stored == wval:
                live_delta = -1
            sp = sp + eight
            if op == 0x31:
                new_pc = value
                ev_kind = 1
                ev_addr = value
            else:
                regs[a] = value
        elif op == 0x50 or op == 0x51:
            if op == 0x50:
                addr = regs[b] + imm
            else:
                addr = regs[a] + imm
            r, moff = _locate(cfg, clen, slen, addr, 8)
            if r == 0:
                ctl[C_STATUS] = ST_MEMFAULT
                ctl[C_FAULT_ADDR] = _first_unmapped(cfg, clen, slen, addr, 8)
                return R_DONE
            if op == 0x50:
                if r == 1:
                    regs[a] = _get_u64(cmem, moff)
                else:
                    regs[a] = _get_u64(smem, moff)
            else:
                if r == 1:
                    _put_u64(cmem, moff, regs[b])
                else:
                    _put_u64(smem, moff, regs[b])
                    rescan = True
        elif op == 0x60:
            if a == 0:
                ctl[C_STATUS] = ST_EXITED
                ctl[C_EXIT] = regs[0] & np.uint64(0xFF)
            elif a == 1:
                fd = regs[0]
                if fd == np.uint64(1) or fd == np.uint64(2):
                    n = np.int64(regs[2]) if regs[2] < np.uint64(1 << 40) else 1 << 40
                    if n > 0:
                        r, moff = _locate(cfg, clen, slen, regs[1], n)
                        if r == 0:
                            ctl[C_STATUS] = ST_MEMFAULT
                            ctl[C_FAULT_ADDR] = _first_unmapped(cfg, clen, slen, regs[1], n)
                            return R_DONE
                        if fd == np.uint64(1):
                            base = np.int64(ctl[C_OUTLEN])
                            for k in range(n):
                                out[base + k] = cmem[moff + k] if r == 1 else smem[moff + k]
                            ctl[C_OUTLEN] = np.uint64(base + n)
                        else:
                            base = np.int64(ctl[C_ERRLEN])
                            for k in range(n):
                                err[base + k] = cmem[moff + k] if r == 1 else smem[moff + k]
                            ctl[C_ERRLEN] = np.uint64(base + n)
                    regs[0] = np.uint64(n)
                else:
                    regs[0] = np.uint64(0xFFFFFFFFFFFFFFFF)
            elif a == 2:
                pos = np.int64(ctl[C_INPOS])
                avail = len(inp) - pos
                want = np.int64(regs[2]) if regs[2] < np.uint64(1 << 40) else 1 << 40
                n = want if want < avail else avail
                if n > 0:
                    r, moff = _locate(cfg, clen, slen, regs[1], n)
                    if r == 0:
                        ctl[C_STATUS] = ST_MEMFAULT
                        ctl[C_FAULT_ADDR] = _first_unmapped(cfg, clen, slen, regs[1], n)
                        return R_DONE
                    for k in range(n):
                        if r == 1:
                            cmem[moff + k] = inp[pos + k]
                        else:
                            smem[moff + k] = inp[pos + k]
                    if r == 2:
                        rescan = True
                    ctl[C_INPOS] = np.uint64(pos + n)
                regs[0] = np.uint64(n)
            # a == 3: recv_wait, a blocking no-op whose cost is regs[0]

        # instruction completed
        ctl[C_TICK] = ctl[C_TICK] + cost
        ctl[C_ICOUNT] = ctl[C_ICOUNT] + one
        ctl[C_PC] = new_pc
        ctl[C_SP] = sp
        ctl[C_LAST_ADDR] = pc
        ctl[C_LAST_LEN] = np.uint64(length)
        ctl[C_LAST_OP] = np.uint64(op)
        steps += one
        if ctl[C_INJ_ARMED] != 0 and sp > ctl[C_INJ_SLOT]:
            ctl[C_INJ_ARMED] = 0

        if do_trace:
            t = np.int64(ctl[C_TCOUNT])
            trace[t, 0] = pc
            trace[t, 1] = np.uint64(length)
            trace[t, 2] = np.uint64(op)
            trace[t, 3] = ctl[C_TICK]
            ctl[C_TCOUNT] = ctl[C_TCOUNT] + one
        if do_events and ev_kind >= 0:
            e = np.int64(ctl[C_ECOUNT])
            events[e, 0] = np.uint64(ev_kind)
            events[e, 1] = ctl[C_TICK]
            events[e, 2] = ev_addr
            ctl[C_ECOUNT] = ctl[C_ECOUNT] + one
        if do_visited and region == 1:
            visited[off] = 1
        if do_windows:
            if rescan:
                cnt, first = _count_live(smem, np.int64(sp - lo), wval)
                slot = lo + np.uint64(first) if first >= 0 else np.uint64(0)
                _window_update(ctl, cfg, windows, cnt, slot)
            elif live_delta != 0:
                _window_update(ctl, cfg, windows, np.int64(ctl[C_WLIVE]) + live_delta, live_slot)
            if ctl[C_STATUS] != 0 and ctl[C_WLIVE] > 0:
                _window_update(ctl, cfg, windows, 0, np.uint64(0))
