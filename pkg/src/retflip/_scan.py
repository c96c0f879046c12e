"""Pairwise xor/popcount scan between return addresses and executed addresses."""

import numpy as np

from ._jit import USING_JIT, kernel

PAGE_OFFSET_MASK = np.uint64(0xFFF)


@kernel
def popcount64(x):
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return (x * np.uint64(0x0101010101010101)) >> np.uint64(56)


@kernel
def _scan_jit(srcs, dests, d, low_only):
    n_src = len(srcs)
    n_dst = len(dests)
    dd = np.uint64(d)
    count = 0
    for i in range(n_src):
        s = srcs[i]
        for j in range(n_dst):
            x = s ^ dests[j]
            if popcount64(x) == dd and (not low_only or (x & ~np.uint64(0xFFF)) == 0):
                count += 1
    out = np.empty((count, 2), dtype=np.int64)
    k = 0
    for i in range(n_src):
        s = srcs[i]
        for j in range(n_dst):
            x = s ^ dests[j]
            if popcount64(x) == dd and (not low_only or (x & ~np.uint64(0xFFF)) == 0):
                out[k, 0] = i
                out[k, 1] = j
                k += 1
    return out


def _scan_numpy(srcs, dests, d, low_only, chunk=1 << 22):
    out = []
    rows = max(1, chunk // max(1, len(dests)))
    for start in range(0, len(srcs), rows):
        block = srcs[start:start + rows, None] ^ dests[None, :]
        hit = np.bitwise_count(block) == d
        if low_only:
            hit &= (block & ~PAGE_OFFSET_MASK) == 0
        i, j = np.nonzero(hit)
        out.append(np.stack([i + start, j], axis=1).astype(np.int64))
    if not out:
        return np.empty((0, 2), dtype=np.int64)
    return np.concatenate(out)


def scan_pairs(srcs, dests, d, low_only):
    """Index pairs (i, j) with popcount(srcs[i] ^ dests[j]) == d, row-major order."""
    srcs = np.ascontiguousarray(srcs, dtype=np.uint64)
    dests = np.ascontiguousarray(dests, dtype=np.uint64)
    if len(srcs) == 0 or len(dests) == 0:
        return np.empty((0, 2), dtype=np.int64)
    if USING_JIT:
        return _scan_jit(srcs, dests, int(d), bool(low_only))
    return _scan_numpy(srcs, dests, int(d), bool(low_only))
