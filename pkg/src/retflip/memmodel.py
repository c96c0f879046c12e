"""Page-compatibility probability, flip profiles, and bait-page placement."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import _mc
from .analysis import ONE_TO_ZERO, ZERO_TO_ONE

PAGE_BITS = 32768
PROFILE_MAGIC = "LFPROF1"
DIRECTIONS = (ZERO_TO_ONE, ONE_TO_ZERO)
LIFO = "LIFO"


class Unattainable(ValueError):
    pass


@dataclass(frozen=True)
class FlipStatistics:
    """Average flippable-cell counts of a page and the number of candidate pages."""

    n01: float
    n10: float
    S: int = PAGE_BITS
    N: int = 0

    def __post_init__(self):
        if self.S <= 0:
            raise ValueError("S must be positive")
        if not (0 <= self.n01 <= self.S and 0 <= self.n10 <= self.S):
            raise ValueError("flippable counts must lie in [0, S]")
        if self.N < 0:
            raise ValueError("N must be >= 0")


@dataclass(frozen=True)
class FlipRequirement:
    """Flips needed in one page: ``k`` 0->1 and ``l`` 1->0 at the listed bit offsets.

    ``offsets`` may be left empty when only the counts matter.
    """

    k: int
    l: int  # noqa: E741
    offsets: tuple = ()

    def __post_init__(self):
        if self.k < 0 or self.l < 0:
            raise ValueError("flip counts must be >= 0")
        if self.offsets:
            if len(self.offsets) != self.k + self.l:
                raise ValueError("k + l must equal the number of offsets")
            if len({o for o, _ in self.offsets}) != len(self.offsets):
                raise ValueError("offsets must be distinct")
            ups = sum(1 for _, d in self.offsets if d == ZERO_TO_ONE)
            if any(d not in DIRECTIONS for _, d in self.offsets) or ups != self.k:
                raise ValueError("offset directions disagree with k and l")

    @property
    def low_probability(self):
        return self.k + self.l > 1


@dataclass(frozen=True)
class FlipProfile:
    page_id: int
    flips: tuple = ()

    def __post_init__(self):
        if len({o for o, _ in self.flips}) != len(self.flips):
            raise ValueError(f"page {self.page_id}: duplicate flip offsets")


@dataclass(frozen=True)
class BaitModel:
    bait_count: int
    victim_demand: int
    noise_rate: float = 0.0
    reuse_policy: str = LIFO

    def __post_init__(self):
        if not 0 <= self.noise_rate <= 1:
            raise ValueError("noise_rate must lie in [0, 1]")
        if self.victim_demand < 1 or self.bait_count < 0:
            raise ValueError("victim_demand must be >= 1 and bait_count >= 0")
        if self.reuse_policy != LIFO:
            raise ValueError("only LIFO reuse is modelled")


def _check_domain(stats, req):
    if req.k + req.l > stats.S:
        raise ValueError(f"k + l = {req.k + req.l} exceeds the page size S = {stats.S}")


def log_page_match(stats, req):
    """log of the chance that one page has every required flip, or -inf."""
    _check_domain(stats, req)
    S, k = stats.S, req.k
    total = 0.0
    for i in range(req.k):
        if stats.n01 - i <= 0:
            return -math.inf
        total += math.log(stats.n01 - i) - math.log(S - i)
    for j in range(req.l):
        if stats.n10 - j <= 0:
            return -math.inf
        total += math.log(stats.n10 - j) - math.log(S - k - j)
    return total


def page_probability(stats, req, N=None):
    """Chance that at least one of ``N`` pages (default ``stats.N``) is compatible."""
    n = stats.N if N is None else N
    lp = log_page_match(stats, req)
    if n == 0 or lp == -math.inf:
        return 0.0
    p = math.exp(lp)
    if p >= 1.0:
        return 1.0
    return -math.expm1(n * math.log1p(-p))


def page_probability_direct(stats, req, N=None):
    """The product form evaluated literally, in exact rationals for whole counts.

    Floating ``1 - (1 - p)**N`` cancels badly for small p, so exact
    arithmetic is used whenever the cell counts are integers.
    """
    _check_domain(stats, req)
    n = stats.N if N is None else N
    exact = stats.n01 == int(stats.n01) and stats.n10 == int(stats.n10)
    one = Fraction(1) if exact else 1.0
    n01 = int(stats.n01) if exact else stats.n01
    n10 = int(stats.n10) if exact else stats.n10
    p = one
    for i in range(req.k):
        p *= max(n01 - i, 0) / one / (stats.S - i)
    for j in range(req.l):
        p *= max(n10 - j, 0) / one / (stats.S - req.k - j)
    return float(one - (one - p) ** n)


def pages_needed(stats, req, target_prob):
    """Smallest N with page_probability >= ``target_prob``."""
    if not 0 < target_prob < 1:
        raise ValueError("target_prob must lie in (0, 1)")
    lp = log_page_match(stats, req)
    if lp == -math.inf:
        raise Unattainable("no page can satisfy the requirement (per-page probability is 0)")
    p = math.exp(lp)
    if p >= 1.0:
        return 1
    n = max(1, math.ceil(math.log1p(-target_prob) / math.log1p(-p)))
    # guard against rounding at the boundary
    while n > 1 and page_probability(stats, req, n - 1) >= target_prob:
        n -= 1
    while page_probability(stats, req, n) < target_prob:
        n += 1
    return n


def probability_curve(stats, req, ns):
    return [(int(n), page_probability(stats, req, int(n))) for n in ns]


def curve_csv(rows, key="N"):
    lines = [f"{key},probability"]
    lines += [f"{n},{p:.12g}" for n, p in rows]
    return "\n".join(lines) + "\n"


def requirement_of(pair, slot_addr, S=PAGE_BITS):
    """Bit offsets inside the slot's page that must flip to turn src into dest.

    The 64-bit word is stored little-endian, so bit b of the value sits at bit
    b % 8 of byte b // 8, i.e. at page bit offset (slot % 4096) * 8 + b.
    """
    if slot_addr % 8:
        raise ValueError("slot address must be 8-aligned")
    base = (slot_addr % (S // 8)) * 8
    offsets = []
    mask = pair.mask
    while mask:
        b = (mask & -mask).bit_length() - 1
        mask &= mask - 1
        up = not (pair.addr_src >> b) & 1
        offsets.append((base + b, ZERO_TO_ONE if up else ONE_TO_ZERO))
    k = sum(1 for _, d in offsets if d == ZERO_TO_ONE)
    return FlipRequirement(k, len(offsets) - k, tuple(offsets))


def apply_requirement(value, slot_addr, req, S=PAGE_BITS):
    """Flip the required bits of ``value`` as stored at ``slot_addr``."""
    base = (slot_addr % (S // 8)) * 8
    for off, d in req.offsets:
        bit = off - base
        if not 0 <= bit < 64:
            raise ValueError(f"offset {off} is outside the slot word")
        if ((value >> bit) & 1) != (d == ONE_TO_ZERO):
            raise ValueError(f"bit {bit} cannot flip {d}")
        value ^= 1 << bit
    return value


def compatible(profile, req):
    """True when every required (offset, direction) appears in the profile."""
    if req.k + req.l and not req.offsets:
        raise ValueError("requirement has flip counts but no bit offsets")
    have = set(profile.flips)
    return all(o in have for o in req.offsets)


def write_profiles(profiles):
    lines = [PROFILE_MAGIC]
    for prof in profiles:
        lines.append(f"page {prof.page_id}")
        lines += [f"flip {off} {d}" for off, d in sorted(prof.flips)]
    return "\n".join(lines) + "\n"


def read_profiles(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != PROFILE_MAGIC:
        raise ValueError(f"missing {PROFILE_MAGIC} header")
    out = []
    page, flips = None, []
    for lineno, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "page" and len(parts) == 2:
            if page is not None:
                out.append(FlipProfile(page, tuple(flips)))
            page, flips = int(parts[1]), []
        elif parts[0] == "flip" and len(parts) == 3 and parts[2] in DIRECTIONS:
            if page is None:
                page = 0
            flips.append((int(parts[1]), parts[2]))
        else:
            raise ValueError(f"line {lineno}: malformed profile line {raw!r}")
    if page is not None:
        out.append(FlipProfile(page, tuple(flips)))
    return out


def _split(trials, workers):
    workers = max(1, min(workers, trials))
    edges = np.linspace(0, trials, workers + 1).astype(np.int64)
    return [(int(a), int(b - a)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_blocks(fn, trials, workers):
    spans = _split(trials, workers)
    with np.errstate(over="ignore"):
        if len(spans) == 1:
            return [fn(*spans[0])]
        with ThreadPoolExecutor(max_workers=len(spans)) as pool:
            return list(pool.map(lambda s: fn(*s), spans))


def page_probability_mc(stats, req, trials=10_000_000, seed=0, workers=1, N=None):
    """Monte Carlo estimate of :func:`page_probability` from sampled cell placements.

    The per-page chance is estimated one required flip at a time: stage t
    pins the earlier t required cells in place, scatters the remaining
    flippable cells over the page, and records how often required cell t
    lands in its class. The stage fractions multiply to the per-page
    estimate, which is then composed over N pages. ``trials`` is spread
    evenly over the stages.
    """
    _check_domain(stats, req)
    n = stats.N if N is None else N
    total = req.k + req.l
    if total == 0:
        return 0.0 if n == 0 else 1.0
    if stats.n01 != int(stats.n01) or stats.n10 != int(stats.n10):
        raise ValueError("Monte Carlo placement needs whole cell counts")
    n01, n10 = int(stats.n01), int(stats.n10)
    if n01 < req.k or n10 < req.l:
        return 0.0
    if n01 + n10 > stats.S:
        raise ValueError("n01 + n10 exceeds the page size")
    # fixed, distinct required positions: 0->1 first, then 1->0
    if req.offsets:
        ordered = sorted(req.offsets, key=lambda od: od[1] != ZERO_TO_ONE)
        positions = [o for o, _ in ordered]
    else:
        positions = [(i * 7919) % stats.S for i in range(total)]
    per_stage = max(1, trials // total)
    p_page = 1.0
    for t in range(total):
        forced = np.array(positions[:t], dtype=np.int64)
        forced_a = min(t, req.k)
        in_a = t < req.k

        def block(first, count, forced=forced, forced_a=forced_a, t=t, in_a=in_a):
            return _mc.placement_hits(stats.S, n01, n10, forced, forced_a, positions[t], in_a,
                                      seed, t, first, count)

        hits = sum(_run_blocks(block, per_stage, workers))
        p_page *= hits / per_stage
    if p_page == 0.0 or n == 0:
        return 0.0
    return -math.expm1(n * math.log1p(-p_page)) if p_page < 1 else 1.0


def bait_simulation(model, trials=10_000, seed=0, b_values=None, workers=1):
    """Estimated chance, per bait count B, that the victim's target page is the flippy one.

    ``b_values`` defaults to ``[model.bait_count]``. Returns {B: probability}.
    """
    if trials <= 0:
        raise ValueError("trials must be positive")
    bs = np.array([model.bait_count] if b_values is None else list(b_values), dtype=np.int64)

    def block(first, count):
        return _mc.bait_hits(bs, model.victim_demand, float(model.noise_rate), seed, first,
                             count)

    counts = np.sum(_run_blocks(block, trials, workers), axis=0)
    return {int(b): int(c) / trials for b, c in zip(bs.tolist(), counts.tolist())}


def bait_distribution(model, b_values):
    """Closed-form chance per B under the same allocator model.

    The victim's target is its ``d``-th allocation; the number of unrelated
    allocations before it is negative binomial, and the flippy page is
    reached on allocation B + 1.
    """
    d, q = model.victim_demand, model.noise_rate
    out = {}
    for b in b_values:
        x = b + 1 - d
        if x < 0:
            out[int(b)] = 0.0
        elif q == 0:
            out[int(b)] = 1.0 if x == 0 else 0.0
        elif q == 1:
            out[int(b)] = 0.0
        else:
            out[int(b)] = math.exp(math.lgamma(x + d) - math.lgamma(d) - math.lgamma(x + 1)
                                   + d * math.log1p(-q) + x * math.log(q))
    return out
