import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stsearch.core import DomainError, NBestEntry, NBestList
from stsearch.ensemble import Candidate, MbrConfig, mbr_rank, mbr_weights, pool
from stsearch.testkit import mbr_bruteforce

WORDS = ["a", "b", "c", "d"]


def random_pool(rng, n):
    out = []
    for i in range(n):
        words = tuple(rng.choice(WORDS) for _ in range(rng.randint(0, 5)))
        out.append(Candidate(words, round(rng.uniform(-5, 0), 3), rng.randint(0, 2), i))
    return out


def all_small_pools():
    """Every pool of 1..6 candidates drawn from a fixed seed sweep."""
    for seed in range(300):
        rng = random.Random(seed)
        yield random_pool(rng, 1 + seed % 6)


@pytest.mark.parametrize("weighting", ["uniform", "score_softmax"])
def test_matches_bruteforce(weighting):
    for cands in all_small_pools():
        cfg = MbrConfig(weighting=weighting, temperature=0.7)
        got = mbr_rank(cands, cfg)
        expected = mbr_bruteforce(cands, mbr_weights(cands, cfg))
        assert [r.candidate for r in got] == [cands[i] for i, _ in expected]
        for r, (_, u) in zip(got, expected):
            assert r.utility == pytest.approx(u, abs=1e-12)


def test_duplicate_consensus():
    # one hypothesis proposed by every system beats a unique one with a better model score
    shared = ("a", "b", "c", "d")
    cands = [Candidate(shared, -2.0, s, 0) for s in range(3)] + [Candidate(("d", "c"), -0.1, 3, 0)]
    assert mbr_rank(cands)[0].candidate.words == shared


@given(seed=st.integers(0, 10**6), n=st.integers(1, 6))
def test_duplicated_candidate_gains_utility(seed, n):
    rng = random.Random(seed)
    cands = random_pool(rng, n)
    target = cands[0]
    before = {r.candidate: r.utility for r in mbr_rank(cands)}[target]
    extra = Candidate(target.words, target.score, 9, 0)
    after = {r.candidate: r.utility for r in mbr_rank(cands + [extra])}[target]
    # uniform weights shrink, so compare the unnormalized sums
    assert after * (n + 1) >= before * n - 1e-12


@given(seed=st.integers(0, 10**6), n=st.integers(1, 6))
def test_permutation_invariant(seed, n):
    rng = random.Random(seed)
    cands = random_pool(rng, n)
    shuffled = list(cands)
    rng.shuffle(shuffled)
    a = [(r.candidate, r.utility) for r in mbr_rank(cands)]
    b = [(r.candidate, r.utility) for r in mbr_rank(shuffled)]
    assert a == b


def test_constant_utility_tie_break():
    # all candidates identical in words, so utilities tie; order falls to score, system, rank
    w = ("a", "b")
    cands = [Candidate(w, -1.0, 1, 0), Candidate(w, -0.5, 2, 1), Candidate(w, -1.0, 0, 3), Candidate(w, -1.0, 0, 2)]
    order = [(c.system, c.rank) for c in (r.candidate for r in mbr_rank(cands))]
    assert order == [(2, 1), (0, 2), (0, 3), (1, 0)]


def test_empty_pool():
    with pytest.raises(DomainError):
        mbr_rank([])
    with pytest.raises(DomainError):
        mbr_rank([NBestList([], 1)])


def test_single_candidate():
    c = Candidate(("a", "b"), -1.0, 0, 0)
    ranked = mbr_rank([c])
    assert ranked[0].candidate == c and ranked[0].utility == pytest.approx(1.0)


def test_pool_keeps_duplicates_and_order():
    e1 = NBestEntry((1, 2), -1.0)
    e2 = NBestEntry((3,), -2.0)
    cands = pool([NBestList([e1, e2], 3), NBestList([e1], 3)])
    assert [(c.words, c.system, c.rank) for c in cands] == [(("1", "2"), 0, 0), (("3",), 0, 1), (("1", "2"), 1, 0)]


class TestWeights:
    def test_uniform(self):
        cands = random_pool(random.Random(0), 4)
        np.testing.assert_allclose(mbr_weights(cands, MbrConfig()), 0.25)

    def test_softmax_sums_to_one_and_orders(self):
        cands = random_pool(random.Random(1), 5)
        w = mbr_weights(cands, MbrConfig(weighting="score_softmax", temperature=0.5))
        assert w.sum() == pytest.approx(1.0)
        order = np.argsort([c.score for c in cands])
        assert list(w[order]) == sorted(w)

    def test_high_temperature_tends_to_uniform(self):
        cands = random_pool(random.Random(2), 5)
        w = mbr_weights(cands, MbrConfig(weighting="score_softmax", temperature=1e9))
        np.testing.assert_allclose(w, 0.2, atol=1e-6)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_bad_temperature(self, t):
        with pytest.raises(DomainError):
            MbrConfig(weighting="score_softmax", temperature=t)

    def test_unknown_weighting(self):
        with pytest.raises(DomainError):
            MbrConfig(weighting="nope")
