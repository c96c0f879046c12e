import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from retflip.analysis import ONE_TO_ZERO, ZERO_TO_ONE, AddressPair
from retflip.memmodel import (
    BaitModel,
    FlipProfile,
    FlipRequirement,
    FlipStatistics,
    Unattainable,
    apply_requirement,
    bait_distribution,
    bait_simulation,
    compatible,
    curve_csv,
    page_probability,
    page_probability_direct,
    page_probability_mc,
    pages_needed,
    probability_curve,
    read_profiles,
    requirement_of,
    write_profiles,
)

STATS = FlipStatistics(100, 100, 32768, 2200)


def test_reference_scenarios():
    assert page_probability(STATS, FlipRequirement(1, 0)) == pytest.approx(0.99880, abs=5e-5)
    assert page_probability(STATS, FlipRequirement(1, 1)) == pytest.approx(0.02, rel=0.2)
    assert page_probability(STATS, FlipRequirement(2, 1)) == pytest.approx(6e-5, rel=0.2)


def test_no_flips_needed():
    assert page_probability(STATS, FlipRequirement(0, 0)) == 1.0
    assert page_probability(STATS, FlipRequirement(0, 0), N=0) == 0.0


def test_requirements_beyond_available_cells():
    s = FlipStatistics(2, 0, 64, 10)
    assert page_probability(s, FlipRequirement(3, 0)) == 0.0
    assert page_probability(s, FlipRequirement(0, 1)) == 0.0
    with pytest.raises(ValueError):
        page_probability(FlipStatistics(2, 2, 4, 1), FlipRequirement(3, 2))


def exact_probability(n01, n10, S, N, k, l):
    """Independent oracle: choose-based counting of placements, exact rationals."""
    if k > n01 or l > n10:
        return Fraction(0)
    # the required k cells are all 0->1 and the l cells all 1->0, drawn without replacement
    p = Fraction(math.perm(n01, k) * math.perm(n10, l), math.perm(S, k + l))
    return 1 - (1 - p) ** N


@pytest.mark.parametrize("k,l", [(1, 0), (0, 1), (1, 1), (2, 1), (1, 2), (3, 0), (2, 2)])
def test_against_counting_oracle(k, l):
    for N in (1, 7, 2200):
        want = float(exact_probability(100, 100, 32768, N, k, l))
        got = page_probability(STATS, FlipRequirement(k, l), N)
        assert got == pytest.approx(want, rel=1e-12)


def test_log_and_direct_forms_agree():
    rng = random.Random(1)
    for _ in range(300):
        S = rng.choice([64, 4096, 32768])
        n01, n10 = rng.randrange(0, S // 2), rng.randrange(0, S // 2)
        k, l = rng.randrange(0, 4), rng.randrange(0, 4)
        N = rng.randrange(0, 5000)
        st_ = FlipStatistics(n01, n10, S, N)
        a = page_probability(st_, FlipRequirement(k, l))
        b = page_probability_direct(st_, FlipRequirement(k, l))
        if b > 1e-300:
            assert a == pytest.approx(b, rel=1e-12)
        else:
            assert a < 1e-290


def test_monotone_over_grid():
    Ns = [0, 1, 10, 100, 2200, 50_000]
    ns = [0, 1, 5, 50, 100, 1000]
    ks = [0, 1, 2, 3]
    for n in ns:
        for k in ks:
            for l in ks:
                row = [page_probability(FlipStatistics(n, n, 32768, N), FlipRequirement(k, l))
                       for N in Ns]
                assert row == sorted(row)
    for N in (1, 2200):
        for k in ks:
            col = [page_probability(FlipStatistics(n, 100, 32768, N), FlipRequirement(k, 1))
                   for n in ns]
            assert col == sorted(col)
            col = [page_probability(FlipStatistics(100, n, 32768, N), FlipRequirement(1, k))
                   for n in ns]
            assert col == sorted(col)
        for n in ns:
            down = [page_probability(FlipStatistics(n, n, 32768, N), FlipRequirement(k, 1))
                    for k in ks]
            assert down == sorted(down, reverse=True)
            down = [page_probability(FlipStatistics(n, n, 32768, N), FlipRequirement(1, l))
                    for l in ks]
            assert down == sorted(down, reverse=True)


@pytest.mark.parametrize("k,l", [(1, 0), (1, 1), (2, 1)])
def test_monte_carlo_small(k, l):
    req = FlipRequirement(k, l)
    est = page_probability_mc(STATS, req, trials=600_000, seed=9)
    assert est == pytest.approx(page_probability(STATS, req), rel=0.2)


def test_monte_carlo_reproducible_and_worker_independent():
    req = FlipRequirement(1, 1)
    a = page_probability_mc(STATS, req, trials=200_000, seed=4)
    assert page_probability_mc(STATS, req, trials=200_000, seed=4) == a
    assert page_probability_mc(STATS, req, trials=200_000, seed=4, workers=3) == a


def test_pages_needed_examples():
    s = FlipStatistics(100, 100, 32768)
    req = FlipRequirement(1, 0)
    n = pages_needed(s, req, 0.99)
    p = 100 / 32768
    assert n == math.ceil(math.log(1 - 0.99) / math.log(1 - p))
    assert page_probability(s, req, n) >= 0.99 > page_probability(s, req, n - 1)
    assert pages_needed(s, req, 1e-9) == 1
    with pytest.raises(Unattainable):
        pages_needed(FlipStatistics(0, 100, 32768), req, 0.5)
    with pytest.raises(ValueError):
        pages_needed(s, req, 1.0)


@given(st.integers(1, 2000), st.integers(1, 2000), st.integers(0, 2), st.integers(0, 2),
       st.floats(1e-6, 0.999999))
@settings(max_examples=300)
def test_pages_needed_is_minimal(n01, n10, k, l, target):
    s = FlipStatistics(n01, n10, 32768)
    req = FlipRequirement(k, l)
    if k > n01 or l > n10:
        return
    n = pages_needed(s, req, target)
    assert page_probability(s, req, n) >= target
    if n > 1:
        assert page_probability(s, req, n - 1) < target


def test_curve_csv():
    rows = probability_curve(STATS, FlipRequirement(1, 1), [0, 100, 2200])
    text = curve_csv(rows)
    assert text.splitlines()[0] == "N,probability"
    assert len(text.splitlines()) == 4


def test_requirement_of_reference_slot():
    pair = AddressPair(0x555555555478, 0x555555555578, 0x100)
    req = requirement_of(pair, 0x7FFFFFFFE0D8)
    assert req.offsets == ((1736, ZERO_TO_ONE),)
    assert (req.k, req.l) == (1, 0) and not req.low_probability


def test_requirement_of_first_bit():
    req = requirement_of(AddressPair(0x11, 0x10, 0x1), 0x7FFFFFFFE000)
    assert req.offsets == ((0, ONE_TO_ZERO),) and (req.k, req.l) == (0, 1)


@given(st.integers(0, 2**64 - 1), st.integers(1, 2**64 - 1), st.integers(0, 511))
def test_requirement_round_trip(src, mask, slot_word):
    slot = 0x7FFF00000000 + slot_word * 8
    pair = AddressPair(src, src ^ mask, mask)
    req = requirement_of(pair, slot)
    assert req.k + req.l == bin(mask).count("1")
    assert req.low_probability == (req.k + req.l > 1)
    assert apply_requirement(src, slot, req) == src ^ mask


def test_compatible_examples():
    req = FlipRequirement(1, 0, ((1736, ZERO_TO_ONE),))
    assert compatible(FlipProfile(0, ((1736, ZERO_TO_ONE), (8, ONE_TO_ZERO))), req)
    assert not compatible(FlipProfile(0, ((1736, ONE_TO_ZERO),)), req)
    assert not compatible(FlipProfile(1), req)
    with pytest.raises(ValueError):
        compatible(FlipProfile(1), FlipRequirement(1, 0))


def test_compatible_matches_containment_oracle():
    rng = random.Random(11)
    dirs = (ZERO_TO_ONE, ONE_TO_ZERO)
    agree = hits = 0
    for i in range(10_000):
        universe = rng.sample(range(64), 24)
        flips = tuple((o, rng.choice(dirs)) for o in universe[:rng.randrange(0, 16)])
        need = [(o, rng.choice(dirs)) for o in rng.sample(range(64), rng.randrange(1, 4))]
        req = FlipRequirement(sum(d == ZERO_TO_ONE for _, d in need),
                              sum(d == ONE_TO_ZERO for _, d in need), tuple(need))
        want = True
        for item in need:
            found = False
            for f in flips:
                if f == item:
                    found = True
            want = want and found
        assert compatible(FlipProfile(i, flips), req) == want
        agree += 1
        hits += want
    assert agree == 10_000 and hits > 50


def test_profile_file_round_trip():
    profs = [FlipProfile(3, ((1736, ZERO_TO_ONE), (12, ONE_TO_ZERO))), FlipProfile(9)]
    text = write_profiles(profs)
    assert text.splitlines()[0] == "LFPROF1"
    back = read_profiles(text)
    assert [p.page_id for p in back] == [3, 9]
    assert sorted(back[0].flips) == sorted(profs[0].flips)
    with pytest.raises(ValueError):
        read_profiles("LFPROF1\nflip x 0->1\n")
    with pytest.raises(ValueError):
        FlipProfile(0, ((1, ZERO_TO_ONE), (1, ONE_TO_ZERO)))


def test_type_validation():
    with pytest.raises(ValueError):
        FlipStatistics(-1, 0)
    with pytest.raises(ValueError):
        FlipRequirement(1, 0, ((1, ZERO_TO_ONE), (2, ZERO_TO_ONE)))
    with pytest.raises(ValueError):
        BaitModel(3, 5, noise_rate=1.5)


# -- bait pages --------------------------------------------------------------

def test_noise_free_bait_is_a_delta():
    m = BaitModel(0, 30)
    got = bait_simulation(m, trials=2000, seed=1, b_values=range(61))
    assert got[29] == 1.0
    assert all(v == 0.0 for b, v in got.items() if b != 29)


def test_noisy_bait_curve_shape():
    m = BaitModel(0, 30, noise_rate=0.3)
    bs = list(range(61))
    got = bait_simulation(m, trials=20_000, seed=5, b_values=bs)
    vals = [got[b] for b in bs]
    peak = vals.index(max(vals))
    assert 0 < max(vals) < 1
    assert sum(v > 0.01 for v in vals) >= 5
    # unimodal up to sampling noise: rises to the peak, falls after it
    smooth = [sum(vals[max(0, i - 2):i + 3]) / len(vals[max(0, i - 2):i + 3]) for i in bs]
    assert all(b >= a - 0.003 for a, b in zip(smooth[:peak], smooth[1:peak + 1]))
    assert all(b <= a + 0.003 for a, b in zip(smooth[peak:], smooth[peak + 1:]))
    assert sum(vals) <= 1.0 + 1e-12
    closed = bait_distribution(m, bs)
    assert max(abs(got[b] - closed[b]) for b in bs) < 0.02
    assert bait_simulation(m, trials=20_000, seed=5, b_values=bs) == got
    assert bait_simulation(m, trials=20_000, seed=5, b_values=bs, workers=4) == got


def test_closed_form_bait_distribution():
    m = BaitModel(0, 30, noise_rate=0.3)
    dist = bait_distribution(m, range(2000))
    assert sum(dist.values()) == pytest.approx(1.0, abs=1e-9)
    assert bait_distribution(BaitModel(0, 30), range(61))[29] == 1.0
