"""Attack windows, stop-jitter sweeps and stack fingerprinting under ASLR."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .vm import DEFAULT_BUDGET, DEFAULT_STACK_PAGES, Executor, load

FP_MAGIC = "LFFP1"
REGION_SLACK = 64 * 1024


@dataclass(frozen=True)
class AttackWindow:
    """Half-open tick interval during which ``slot_addr`` holds the watched address."""

    slot_addr: int
    start_tick: int
    end_tick: int

    @property
    def length(self):
        return self.end_tick - self.start_tick


@dataclass(frozen=True)
class StopModel:
    """Normal distribution of the tick at which a stop signal lands."""

    mean: float
    stddev: float
    distribution: str = "normal"

    def __post_init__(self):
        if self.stddev < 0:
            raise ValueError("stddev must be >= 0")
        if self.distribution != "normal":
            raise ValueError(f"unsupported distribution {self.distribution!r}")

    def sample(self, rng, n, center=None):
        """``n`` integer stop ticks, clamped at 0, centred on ``center`` (default: mean)."""
        mu = self.mean if center is None else center
        x = mu + self.stddev * rng.standard_normal(n)
        return np.maximum(np.floor(x), 0).astype(np.int64)


# 1 tick stands for 1000 cycles of the measured stop latencies
PRESETS = {
    "python-like": StopModel(34_000, 2_700),
    "bash-like": StopModel(18_000, 300),
}


def windows(program, input=b"", seed=0, budget=DEFAULT_BUDGET, addr_src=0, degradation=1,
            stack_pages=DEFAULT_STACK_PAGES):
    """Maximal tick intervals during which some live stack word equals ``addr_src``.

    ``addr_src`` is an absolute address under the layout drawn from ``seed``.
    A word is live when it lies between sp and the stack top; a snapshot at
    tick T reflects every instruction completed by T.
    """
    state, _ = load(program, seed, stack_pages, input)
    ex = Executor(state, budget=budget, degradation=degradation, watch=addr_src)
    ex.resume()
    return [AttackWindow(int(slot), int(s), int(e)) for s, e, slot in ex.window_rows().tolist()]


def _merged(wins):
    spans = sorted((w.start_tick, w.end_tick) for w in wins if w.end_tick > w.start_tick)
    out = []
    for s, e in spans:
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return out


def hit_probability(wins, model):
    """Probability that a stop drawn from ``model`` lands inside the union of ``wins``.

    Stops are floored to whole ticks and clamped at 0, so a window starting at
    tick 0 also collects the mass below zero.
    """
    spans = _merged(wins)
    if not spans:
        return 0.0
    mu, sd = float(model.mean), float(model.stddev)
    if sd == 0:
        t = max(math.floor(mu), 0)
        return float(any(s <= t < e for s, e in spans))
    total = 0.0
    for s, e in spans:
        lo = 0.0 if s == 0 else ndtr((s - mu) / sd)
        total += ndtr((e - mu) / sd) - lo
    return float(min(max(total, 0.0), 1.0))


def _hits(ticks, spans):
    if not spans:
        return np.zeros(len(ticks), dtype=bool)
    starts = np.array([s for s, _ in spans], dtype=np.int64)
    ends = np.array([e for _, e in spans], dtype=np.int64)
    idx = np.searchsorted(starts, ticks, side="right") - 1
    ok = idx >= 0
    hit = np.zeros(len(ticks), dtype=bool)
    hit[ok] = ticks[ok] < ends[idx[ok]]
    return hit


def hit_probability_mc(wins, model, trials=100_000, seed=0):
    """Monte Carlo estimate of :func:`hit_probability`."""
    rng = np.random.default_rng(seed)
    ticks = model.sample(rng, trials)
    return float(np.count_nonzero(_hits(ticks, _merged(wins)))) / trials


@dataclass(frozen=True)
class StackSnapshot:
    stop_tick: int
    words: dict
    stack_base: int = 0
    terminated: bool = False

    def find(self, value):
        return sorted(a for a, v in self.words.items() if v == value)


def snapshot(program, input=b"", seed=0, tick=0, budget=DEFAULT_BUDGET, degradation=1,
             stack_pages=DEFAULT_STACK_PAGES):
    """Stop the process at ``tick`` and read its live stack."""
    return snapshots(program, input, seed, [tick], budget, degradation, stack_pages)[0]


def snapshots(program, input=b"", seed=0, ticks=(), budget=DEFAULT_BUDGET, degradation=1,
              stack_pages=DEFAULT_STACK_PAGES):
    """Snapshots at every tick in ``ticks`` from a single forward run."""
    order = np.argsort(np.asarray(ticks, dtype=np.int64), kind="stable")
    state, layout = load(program, seed, stack_pages, input)
    ex = Executor(state, budget=budget, degradation=degradation)
    out = [None] * len(order)
    for i in order.tolist():
        t = int(ticks[i])
        if t < 0:
            raise ValueError("stop tick must be >= 0")
        if not state.terminated:
            ex.resume(stop_tick=t)
        gone = state.terminated
        out[i] = StackSnapshot(t, {} if gone else state.stack_words(), layout.stack_base, gone)
    return out


@dataclass(frozen=True)
class SweepPoint:
    stop_tick: int
    trials: int
    hits: int

    @property
    def hit_rate(self):
        return self.hits / self.trials


@dataclass
class SweepReport:
    points: list = field(default_factory=list)

    @property
    def best(self):
        """Earliest stop point with the highest hit rate."""
        if not self.points:
            return None
        return max(self.points, key=lambda p: (p.hits / p.trials, -p.stop_tick))

    def to_csv(self):
        lines = ["stop_tick,trials,hits,hit_rate"]
        for p in self.points:
            lines.append(f"{p.stop_tick},{p.trials},{p.hits},{p.hit_rate:.6f}")
        return "\n".join(lines) + "\n"


def _point_ticks(model, root_seed, k, center, trials):
    rng = np.random.default_rng(np.random.SeedSequence([int(root_seed), int(k)]))
    return model.sample(rng, trials, center=center)


def time_sweep(program, input=b"", seed=0, addr_src=0, start=0, interval=100, model=None,
               trials=100, points=None, budget=DEFAULT_BUDGET, degradation=1,
               stack_pages=DEFAULT_STACK_PAGES, workers=1, method="windows"):
    """Hit rate of stop signals aimed at ``start + k*interval``.

    Each point draws ``trials`` stop ticks from ``model`` centred on the point,
    using a stream derived from (``seed``, k). Without ``points`` the sweep
    covers the baseline run up to its final tick. ``method="snapshot"``
    inspects real stack snapshots instead of the precomputed windows; both
    give the same counts.
    """
    if interval <= 0 or trials <= 0:
        raise ValueError("interval and trials must be positive")
    if model is None:
        model = PRESETS["bash-like"]
    if points is None:
        state, _ = load(program, seed, stack_pages, input)
        Executor(state, budget=budget, degradation=degradation).resume()
        points = max(0, (state.tick - start) // interval) + 1
    centers = [start + k * interval for k in range(points)]

    if method == "windows":
        spans = _merged(windows(program, input, seed, budget, addr_src, degradation,
                                stack_pages))

        def work(k):
            ticks = _point_ticks(model, seed, k, centers[k], trials)
            return int(np.count_nonzero(_hits(ticks, spans)))
    elif method == "snapshot":
        def work(k):
            ticks = _point_ticks(model, seed, k, centers[k], trials)
            uniq, inv = np.unique(ticks, return_inverse=True)
            snaps = snapshots(program, input, seed, uniq.tolist(), budget, degradation,
                              stack_pages)
            found = np.array([addr_src in s.words.values() for s in snaps], dtype=bool)
            return int(np.count_nonzero(found[inv]))
    else:
        raise ValueError(f"unknown sweep method {method!r}")

    if workers > 1 and points > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hits = list(pool.map(work, range(points)))
    else:
        hits = [work(k) for k in range(points)]
    return SweepReport([SweepPoint(c, trials, h) for c, h in zip(centers, hits)])


class FingerprintError(RuntimeError):
    pass


class FingerprintNotFound(FingerprintError):
    pass


class FingerprintAmbiguous(FingerprintError):
    pass


@dataclass(frozen=True)
class Fingerprint:
    features: tuple  # (offset from stack top, value), ascending offset
    target_offset: int

    def to_text(self):
        lines = [FP_MAGIC]
        lines += [f"feat {_shex(off)}={val:#x}" for off, val in self.features]
        lines.append(f"target {_shex(self.target_offset)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != FP_MAGIC:
            raise ValueError(f"missing {FP_MAGIC} header")
        feats, target = [], None
        for ln in lines[1:]:
            kind, _, rest = ln.partition(" ")
            if kind == "feat":
                off, _, val = rest.partition("=")
                feats.append((int(off, 16), int(val, 16)))
            elif kind == "target":
                target = int(rest, 16)
            else:
                raise ValueError(f"unknown fingerprint line {ln!r}")
        if target is None or not feats:
            raise ValueError("fingerprint needs features and a target line")
        return cls(tuple(sorted(feats)), target)


def _shex(v):
    return f"-{-v:#x}" if v < 0 else f"{v:#x}"


def _volatile(value, layout):
    bases = (layout.code_base, layout.stack_bottom, layout.stack_base)
    return value == 0 or any(abs(value - b) <= REGION_SLACK for b in bases)


def fingerprint_stack(program, input=b"", seeds=(0, 1), trigger_tick=0, addr_src=0,
                      budget=DEFAULT_BUDGET, degradation=1, stack_pages=DEFAULT_STACK_PAGES):
    """Stack words that stay put across ASLR seeds, and the slot's offset from them.

    ``addr_src`` is taken under the layout of ``seeds[0]`` and relocated to
    each other seed's code base. Zero words and words pointing near a mapped
    region are ignored since they carry no layout-independent signal.
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("need at least two seeds")
    offset_in_image = None
    per_seed = []
    for s in seeds:
        state, layout = load(program, s, stack_pages, input)
        if offset_in_image is None:
            offset_in_image = addr_src - layout.code_base
        target = layout.code_base + offset_in_image
        Executor(state, budget=budget, degradation=degradation).resume(stop_tick=trigger_tick)
        if state.terminated:
            raise FingerprintError(f"seed {s}: process ended before tick {trigger_tick}")
        words = state.stack_words()
        slots = sorted(a for a, v in words.items() if v == target)
        if not slots:
            raise FingerprintError(f"seed {s}: {target:#x} is not on the stack at tick "
                                   f"{trigger_tick}")
        top = layout.stack_base
        feats = {a - top: v for a, v in words.items()
                 if a != slots[0] and not _volatile(v, layout)}
        per_seed.append((slots[0] - top, feats))

    common = dict(per_seed[0][1])
    for _, feats in per_seed[1:]:
        common = {o: v for o, v in common.items() if feats.get(o) == v}
    if not common:
        raise FingerprintNotFound("no stack word is invariant across the profiling seeds")
    first = min(common)
    offsets = {slot - first for slot, _ in per_seed}
    if len(offsets) != 1:
        raise FingerprintError("target offset differs between seeds")
    return Fingerprint(tuple(sorted(common.items())), offsets.pop())


def locate(snap, fp):
    """Address of the target slot in ``snap``, found through the fingerprint."""
    words = snap.words
    base_off, base_val = fp.features[0]
    rel = [(off - base_off, val) for off, val in fp.features[1:]]
    matches = [a for a, v in words.items() if v == base_val
               and all(words.get(a + r) == val for r, val in rel)]
    if not matches:
        raise FingerprintNotFound("fingerprint features not present in snapshot")
    if len(matches) > 1:
        raise FingerprintAmbiguous(
            f"fingerprint matches at {len(matches)} positions: "
            + ", ".join(f"{a:#x}" for a in sorted(matches)))
    return matches[0] + fp.target_offset
