import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import asm, fixture
from retflip.tracer import trace
from retflip.timing import (
    PRESETS,
    AttackWindow,
    Fingerprint,
    FingerprintAmbiguous,
    FingerprintError,
    FingerprintNotFound,
    StackSnapshot,
    StopModel,
    fingerprint_stack,
    hit_probability,
    hit_probability_mc,
    locate,
    snapshot,
    snapshots,
    time_sweep,
    windows,
)
from retflip.vm import draw_layout

BUDGET = 1_000_000


def return_addrs(fx, seed=0):
    tr = trace(fx.program, fx.incorrect, seed)
    return tr, np.unique(tr.return_addrs).tolist()


def test_windows_are_sound(corpus):
    tr, srcs = return_addrs(corpus)
    done = tr.tick.tolist()
    for src in srcs:
        wins = windows(corpus.program, corpus.incorrect, 0, BUDGET, src)
        assert wins, hex(src)
        for w in wins:
            assert w.end_tick > w.start_tick
            inside = {w.start_tick, w.end_tick - 1} | {t for t in done
                                                        if w.start_tick <= t < w.end_tick}
            outside = {w.start_tick - 1, w.end_tick}
            probes = sorted(inside | outside)
            snaps = dict(zip(probes, snapshots(corpus.program, corpus.incorrect, 0, probes)))
            for t in inside:
                assert snaps[t].words.get(w.slot_addr) == src, (hex(src), t)
            for t in outside:
                assert snaps[t].words.get(w.slot_addr) != src, (hex(src), t)


def test_single_call_window_covers_the_body():
    body = " nop\n" * 49
    p = asm(f"main:\n call f\n halt 0\nf:\n{body} ret\n")
    tr = trace(p)
    (w,) = windows(p, addr_src=tr.layout.code_base + 5)
    assert w.length >= 50


def test_never_stored_address_has_no_window(authgate):
    assert windows(authgate.program, authgate.incorrect, 0, BUDGET, 0x1234) == []


@pytest.mark.parametrize("name", ["toycipher", "treeclass"])
def test_degradation_scales_windows(name):
    fx = fixture(name)
    tr, srcs = return_addrs(fx)
    for src in srcs:
        one = windows(fx.program, fx.incorrect, 0, BUDGET, src)
        ten = windows(fx.program, fx.incorrect, 0, BUDGET, src, degradation=10)
        assert [w.length * 10 for w in one] == [w.length for w in ten]


def test_authgate_window_spans_the_wait(authgate):
    tr = trace(authgate.program, authgate.incorrect)
    src = tr.layout.code_base + 0x16
    (w,) = windows(authgate.program, authgate.incorrect, 0, BUDGET, src)
    assert w.length >= 100_000


def test_hit_probability_edges():
    m = StopModel(1000, 10)
    assert hit_probability([], m) == 0.0
    assert hit_probability([AttackWindow(0, 940, 1061)], m) >= 0.999999
    assert hit_probability([AttackWindow(0, 0, 5)], StopModel(-50, 10)) > 0.999
    assert hit_probability([AttackWindow(0, 10, 20)], StopModel(15, 0)) == 1.0
    assert hit_probability([AttackWindow(0, 10, 20)], StopModel(20, 0)) == 0.0
    with pytest.raises(ValueError):
        StopModel(0, -1)


def test_stop_samples_are_clamped():
    ticks = StopModel(-10, 5).sample(np.random.default_rng(0), 1000)
    assert ticks.min() == 0 and ticks.dtype == np.int64


def test_analytic_matches_monte_carlo(corpus):
    tr, srcs = return_addrs(corpus)
    for src in srcs:
        wins = windows(corpus.program, corpus.incorrect, 0, BUDGET, src)
        mid = (wins[0].start_tick + wins[0].end_tick) / 2
        for m in (PRESETS["bash-like"], PRESETS["python-like"], StopModel(mid, 40),
                  StopModel(mid, wins[0].length)):
            a = hit_probability(wins, m)
            b = hit_probability_mc(wins, m, 100_000, seed=3)
            assert abs(a - b) <= 0.02


@given(st.lists(st.tuples(st.integers(0, 5000), st.integers(1, 500)), min_size=1, max_size=6),
       st.integers(0, 5), st.integers(1, 300))
@settings(max_examples=200)
def test_hit_probability_grows_with_windows(spans, grow, mean_sd):
    wins = [AttackWindow(0, s, s + n) for s, n in spans]
    wider = [AttackWindow(0, max(0, w.start_tick - grow), w.end_tick + grow) for w in wins]
    m = StopModel(2500, mean_sd * 10)
    assert hit_probability(wider, m) >= hit_probability(wins, m) - 1e-12
    assert hit_probability(wins + [AttackWindow(0, 9000, 9100)], m) >= \
        hit_probability(wins, m) - 1e-12


def _narrow():
    fx = fixture("straightline")
    tr = trace(fx.program, fx.incorrect)
    target = tr.layout.code_base + fx.program.symbols["short_wait"]
    addr = tr.addr.tolist()
    (i,) = [i for i in range(len(addr) - 1) if tr.opcode[i] == 0x30 and addr[i + 1] == target]
    return fx, addr[i] + int(tr.length[i])


def test_fine_sweep_finds_the_window():
    fx, src = _narrow()
    (w,) = windows(fx.program, fx.incorrect, 0, BUDGET, src)
    model = StopModel(0, w.length / 7)
    rep = time_sweep(fx.program, fx.incorrect, 0, src, 0, w.length // 2, model, 200)
    assert rep.best.hits > 0


def test_bash_stops_beat_python_stops_on_a_narrow_window():
    fx, src = _narrow()
    bash = time_sweep(fx.program, fx.incorrect, 0, src, 0, 100, PRESETS["bash-like"], 2000)
    py = time_sweep(fx.program, fx.incorrect, 0, src, 0, 100, PRESETS["python-like"], 2000)
    assert bash.best.hit_rate >= py.best.hit_rate
    assert bash.best.hit_rate > 0.8 and py.best.hit_rate < 0.25


def test_sweep_is_deterministic_and_worker_independent():
    fx, src = _narrow()
    m = PRESETS["bash-like"]
    a = time_sweep(fx.program, fx.incorrect, 0, src, 4000, 250, m, 300)
    b = time_sweep(fx.program, fx.incorrect, 0, src, 4000, 250, m, 300, workers=4)
    assert a == b and a.to_csv() == b.to_csv()
    assert a.to_csv().splitlines()[0] == "stop_tick,trials,hits,hit_rate"


def test_snapshot_sweep_agrees_with_windows():
    fx, src = _narrow()
    m = StopModel(0, 400)
    a = time_sweep(fx.program, fx.incorrect, 0, src, 4500, 300, m, 100, points=6)
    b = time_sweep(fx.program, fx.incorrect, 0, src, 4500, 300, m, 100, points=6,
                   method="snapshot")
    assert a == b


def test_degradation_never_hurts_the_best_point(corpus):
    tr, srcs = return_addrs(corpus)
    m = PRESETS["bash-like"]
    for src in srcs:
        one = time_sweep(corpus.program, corpus.incorrect, 0, src, 0, 200, m, 200)
        slow = time_sweep(corpus.program, corpus.incorrect, 0, src, 0, 200, m, 200,
                          degradation=10)
        assert slow.best.hit_rate >= one.best.hit_rate


def test_snapshot_words_are_contiguous(authgate):
    snap = snapshot(authgate.program, authgate.incorrect, 0, 5000)
    addrs = sorted(snap.words)
    assert all(a % 8 == 0 for a in addrs)
    assert addrs == list(range(addrs[0], snap.stack_base, 8))


# -- fingerprints ------------------------------------------------------------

TRIGGER = 50_000


def _auth_src(fx, seed=0):
    return draw_layout(fx.program, seed).code_base + 0x16


def test_pushed_constant_is_a_feature(authgate):
    fp = fingerprint_stack(authgate.program, authgate.incorrect, (0, 1, 2), TRIGGER,
                           _auth_src(authgate))
    assert 0xC0FFEE in [v for _, v in fp.features]


def test_same_seed_twice_succeeds(authgate):
    fingerprint_stack(authgate.program, authgate.incorrect, (4, 4), TRIGGER,
                      _auth_src(authgate, 4))


def test_target_offset_is_stable_and_matches_raw_snapshots(authgate):
    fp = fingerprint_stack(authgate.program, authgate.incorrect, range(100), TRIGGER,
                           _auth_src(authgate))
    first = fp.features[0][0]
    for s in range(100):
        snap = snapshot(authgate.program, authgate.incorrect, s, TRIGGER)
        (slot,) = snap.find(_auth_src(authgate, s))
        assert slot - snap.stack_base - first == fp.target_offset


def test_locate_on_unseen_seeds(authgate):
    fp = fingerprint_stack(authgate.program, authgate.incorrect, range(8), TRIGGER,
                           _auth_src(authgate))
    for s in range(1000, 1020):
        snap = snapshot(authgate.program, authgate.incorrect, s, TRIGGER)
        slot = locate(snap, fp)
        target = _auth_src(authgate, s)
        assert snap.words[slot] == target
        assert snap.find(target) == [slot]


def test_locate_errors(authgate):
    fp = fingerprint_stack(authgate.program, authgate.incorrect, (0, 1), TRIGGER,
                           _auth_src(authgate))
    snap = snapshot(authgate.program, authgate.incorrect, 7, TRIGGER)
    vals = {v for _, v in fp.features}
    zeroed = StackSnapshot(snap.stop_tick, {a: (0 if v in vals else v)
                                            for a, v in snap.words.items()}, snap.stack_base)
    with pytest.raises(FingerprintNotFound):
        locate(zeroed, fp)
    # plant a second copy of the feature run well below the real one
    words = dict(snap.words)
    lo = min(words)
    span = fp.features[-1][0] - fp.features[0][0]
    for off, val in fp.features:
        words[lo - 0x100 - span + (off - fp.features[0][0])] = val
    with pytest.raises(FingerprintAmbiguous):
        locate(StackSnapshot(snap.stop_tick, words, snap.stack_base), fp)


def test_fingerprint_failures(authgate):
    with pytest.raises(FingerprintError):  # the slot is gone once the run is over
        fingerprint_stack(authgate.program, authgate.incorrect, (0, 1), 150_000,
                          _auth_src(authgate))
    with pytest.raises(FingerprintError):
        fingerprint_stack(authgate.program, authgate.incorrect, (0, 1), 3, _auth_src(authgate))
    # a lone return address and nothing else invariant on the stack
    p = asm("main:\n call f\n halt 0\nf:\n movi r0, 100\n sys 3\n ret\n")
    src = draw_layout(p, 0).code_base + 5
    with pytest.raises(FingerprintNotFound):
        fingerprint_stack(p, b"", (0, 1), 50, src)


def test_fingerprint_text_round_trip(authgate):
    fp = fingerprint_stack(authgate.program, authgate.incorrect, (0, 1, 2), TRIGGER,
                           _auth_src(authgate))
    text = fp.to_text()
    assert text.startswith("LFFP1\n") and "target " in text
    assert Fingerprint.from_text(text) == fp
