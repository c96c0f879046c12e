"""Monte Carlo kernels for page placement and bait-page reuse.

Every trial draws from its own splitmix64 stream keyed by (seed, stream id,
global trial index), so counts do not depend on how trials are split across
workers or on whether the kernels are compiled.
"""

import numpy as np

from ._jit import kernel

GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@kernel
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@kernel
def trial_state(seed, stream, trial):
    return _mix(_mix(np.uint64(seed) + GOLDEN * np.uint64(stream + 1)) ^ np.uint64(trial))


@kernel
def _next(state):
    state = state + GOLDEN
    return state, _mix(state)


@kernel
def _below(z, n):
    # top 32 bits scaled into [0, n); n < 2**32
    return np.int64(((z >> np.uint64(32)) * np.uint64(n)) >> np.uint64(32))


@kernel
def placement_hits(S, n01, n10, forced, forced_a, target, target_in_a, seed, stream,
                   first, count):
    """Trials in [first, first+count) where ``target`` lands in its flip class.

    Each trial places ``n01`` 0->1 cells and ``n10`` 1->0 cells on distinct
    bit positions of an ``S``-bit page. The positions in ``forced`` are pinned
    in advance, the first ``forced_a`` of them as 0->1 cells and the rest as
    1->0 cells; the remaining cells go to uniformly random free positions.
    """
    occ = np.zeros(S, dtype=np.uint8)
    for i in range(len(forced)):
        occ[forced[i]] = 1
    need_a = n01 - forced_a
    need_b = n10 - (len(forced) - forced_a)
    picked = np.empty(need_a + need_b, dtype=np.int64)
    hits = 0
    for t in range(first, first + count):
        st = trial_state(seed, stream, t)
        n_picked = 0
        hit = False
        for cls in range(2):
            need = need_a if cls == 0 else need_b
            for _ in range(need):
                while True:
                    st, z = _next(st)
                    pos = _below(z, S)
                    if occ[pos] == 0:
                        break
                occ[pos] = 2
                picked[n_picked] = pos
                n_picked += 1
                if pos == target and (cls == 0) == target_in_a:
                    hit = True
        for i in range(n_picked):
            occ[picked[i]] = 0
        if hit:
            hits += 1
    return hits


@kernel
def bait_hits(b_values, demand, noise, seed, first, count):
    """Per bait count, trials in which the victim's ``demand``-th page is the flippy one.

    The flippy page sits under ``B`` bait pages on a LIFO free list. Each
    allocation is taken by an unrelated process with probability ``noise``,
    otherwise by the victim. Pages beyond the free list come from elsewhere.
    A trial's stream is shared by every B, so per-B counts partition it.
    """
    out = np.zeros(len(b_values), dtype=np.int64)
    for t in range(first, first + count):
        for bi in range(len(b_values)):
            depth = b_values[bi]  # pops before the flippy page surfaces
            st = trial_state(seed, 0, t)
            got = 0
            popped = 0
            while True:
                st, z = _next(st)
                u = np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)
                is_flippy = popped == depth
                popped += 1
                if u < noise:
                    if is_flippy:
                        break
                    continue
                got += 1
                if got == demand:
                    if is_flippy:
                        out[bi] += 1
                    break
                if is_flippy:
                    break
    return out
