"""Trace differencing and Hamming-distance candidate generation."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._scan import scan_pairs

PAGE_OFFSET_BITS = 12
CAND_MAGIC = "LFCAND1"
ZERO_TO_ONE = "0->1"
ONE_TO_ZERO = "1->0"


class LayoutMismatch(ValueError):
    pass


def hamming(a, b):
    """Number of differing bits between two 64-bit addresses."""
    return ((int(a) ^ int(b)) & 0xFFFFFFFFFFFFFFFF).bit_count()


@dataclass(frozen=True, order=True)
class AddressPair:
    addr_src: int
    addr_dest: int
    mask: int
    call_seqs: tuple = ()

    @property
    def bit_index(self):
        """Flipped bit for single-bit pairs, else None."""
        if self.mask and self.mask & (self.mask - 1) == 0:
            return self.mask.bit_length() - 1
        return None

    @property
    def direction(self):
        bit = self.bit_index
        if bit is None:
            return None
        return ONE_TO_ZERO if (self.addr_src >> bit) & 1 else ZERO_TO_ONE

    @property
    def src_call_seq(self):
        return self.call_seqs[0] if self.call_seqs else None

    @property
    def key(self):
        return (self.addr_src, self.addr_dest)


@dataclass(frozen=True)
class DiffSet:
    addresses: frozenset

    def __len__(self):
        return len(self.addresses)

    def __contains__(self, addr):
        return addr in self.addresses

    def as_array(self):
        return np.array(sorted(self.addresses), dtype=np.uint64)


def diff_traces(correct, incorrect):
    """Addresses executed under the correct input but never under the incorrect one."""
    if correct.layout is not None and incorrect.layout is not None \
            and correct.layout.code_base != incorrect.layout.code_base:
        raise LayoutMismatch(
            f"traces use different code bases ({correct.layout.code_base:#x} vs "
            f"{incorrect.layout.code_base:#x}); addresses are not comparable")
    only = np.setdiff1d(correct.addresses(), incorrect.addresses(), assume_unique=True)
    return DiffSet(frozenset(int(a) for a in only))


def _call_seq_index(trace):
    rets = trace.return_addrs
    seqs = trace.call_seqs
    index = {}
    for r, s in zip(rets.tolist(), seqs.tolist()):
        index.setdefault(r, []).append(s)
    return index


def candidates_matched(trace, targets=None, d=1, low_bits_only=False, workers=1):
    """Pairs (return address, destination) at Hamming distance exactly ``d``.

    Return addresses come from the call records of ``trace``. Destinations are
    ``targets`` when given (a DiffSet or any iterable of addresses), otherwise
    every address executed in ``trace``. Output is sorted by (src, dest).
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    seq_index = _call_seq_index(trace)
    srcs = np.array(sorted(seq_index), dtype=np.uint64)
    if targets is None:
        dests = trace.addresses()
    elif isinstance(targets, DiffSet):
        dests = targets.as_array()
    else:
        dests = np.unique(np.asarray(list(targets), dtype=np.uint64))
    hits = _parallel_scan(srcs, dests, d, low_bits_only, workers)
    pairs = []
    for i, j in hits.tolist():
        s, t = int(srcs[i]), int(dests[j])
        pairs.append(AddressPair(s, t, s ^ t, tuple(seq_index[s])))
    pairs.sort(key=lambda p: p.key)
    return pairs


def _parallel_scan(srcs, dests, d, low_only, workers):
    if workers <= 1 or len(srcs) < 2:
        return scan_pairs(srcs, dests, d, low_only)
    bounds = np.linspace(0, len(srcs), min(workers, len(srcs)) + 1).astype(int)
    parts = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]

    def work(span):
        lo, hi = span
        out = scan_pairs(srcs[lo:hi], dests, d, low_only)
        out[:, 0] += lo
        return out

    with ThreadPoolExecutor(max_workers=workers) as pool:
        chunks = list(pool.map(work, parts))
    return np.concatenate(chunks) if chunks else np.empty((0, 2), dtype=np.int64)


def candidates_exhaustive_offset(trace):
    """Every single-bit flip in the page offset of every unique return address."""
    seq_index = _call_seq_index(trace)
    pairs = []
    for src in sorted(seq_index):
        for bit in range(PAGE_OFFSET_BITS):
            mask = 1 << bit
            pairs.append(AddressPair(src, src ^ mask, mask, tuple(seq_index[src])))
    pairs.sort(key=lambda p: p.key)
    return pairs


def brute_force_pairs(trace, targets=None, d=1, low_bits_only=False):
    """Quadratic reference enumeration over raw call records and addresses."""
    recs = trace.records
    dests = set(targets) if targets is not None else {r.addr for r in recs}
    found = {}
    for rec in recs:
        if not rec.is_call:
            continue
        for dest in dests:
            x = rec.return_addr ^ dest
            bits = bin(x).count("1")
            if bits != d:
                continue
            if low_bits_only and x >> PAGE_OFFSET_BITS:
                continue
            found.setdefault((rec.return_addr, dest), []).append(rec.seq)
    return sorted(AddressPair(s, t, s ^ t, tuple(v)) for (s, t), v in found.items())


def write_candidates(pairs):
    lines = [CAND_MAGIC]
    for p in pairs:
        calls = ",".join(str(s) for s in p.call_seqs)
        lines.append(f"src={p.addr_src:#x} dest={p.addr_dest:#x} mask={p.mask:#x} calls={calls}")
    return "\n".join(lines) + "\n"


def read_candidates(text):
    lines = text.splitlines()
    if not lines or lines[0] != CAND_MAGIC:
        raise ValueError(f"missing {CAND_MAGIC} header")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            f = dict(part.split("=", 1) for part in line.split())
            src, dest, mask = int(f["src"], 16), int(f["dest"], 16), int(f["mask"], 16)
            calls = tuple(int(s) for s in f["calls"].split(",") if s)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"line {lineno}: malformed candidate ({exc})") from None
        if src ^ dest != mask:
            raise ValueError(f"line {lineno}: mask does not equal src ^ dest")
        out.append(AddressPair(src, dest, mask, calls))
    return out
