"""Acceptance suite: one test per criterion, summarized as PASS/FAIL lines at the end of the run."""

import math
import subprocess
import sys
import time

import numpy as np
import pytest

from stsearch.core import PosteriorLattice, is_impossible, save_lattice
from stsearch.ctc import ctc_forward, ctc_prefix_state_for
from stsearch.ensemble import Candidate, MbrConfig, mbr_rank, mbr_weights
from stsearch.metrics import LatencyRecord, average_lagging, corpus_al, corpus_bleu
from stsearch.search import BeamConfig, label_sync_search, time_sync_search
from stsearch.streaming import HoldN, LocalAgreement, StreamPolicy, open_session
from stsearch.testkit import (SyntheticSpec, exhaustive_oracle, generate_synthetic, mbr_bruteforce,
                              random_joint_scorer, random_lattice, random_planted_spec, random_trie_scorer,
                              small_vocab, transducer_oracle)
from stsearch.transducer import TransducerConfig, alsd_search, graves_search, tsd_search

from .test_ctc import brute_force_logp, grid_cases, random_case
from .test_ensemble import all_small_pools
from .test_metrics import SLICES, load_bleu_fixture

criterion = pytest.mark.criterion


def checked_stream(source, scorer, config, policy, use_boundary=True):
    """Drive a session block by block, asserting committed output never shrinks or changes."""
    if isinstance(source, PosteriorLattice):
        T, vocab, blocks = source.num_frames, source.vocab, source.blocks(policy.block_size)
    else:
        T, vocab = source, None
        blocks = [min(policy.block_size, T - s) for s in range(0, T, policy.block_size)]
    session = open_session(policy, scorer, config, vocab)
    history = []
    for i, block in enumerate(blocks):
        session.process_block(block, is_final=i == len(blocks) - 1)
        assert session.committed[:len(history)] == history, "retraction"
        history = list(session.committed)
        if use_boundary and session.detect_boundary():
            break
    result, record = session.finalize(source_len=T)
    assert list(result.tokens)[:len(history)] == history, "retraction at finalize"
    return result, record, session


@criterion(1, "offline oracle equivalence")
def test_offline_oracle_equivalence():
    start = time.perf_counter()
    for seed in range(200):
        rng = np.random.Generator(np.random.PCG64(seed))
        vocab = small_vocab(int(rng.integers(1, 3)))  # blank plus at most 3 emittable labels
        T = int(rng.integers(1, 7))
        lat = random_lattice(rng, vocab, T, alpha=float(rng.choice([0.3, 1.0])))
        scorer = random_trie_scorer(rng, vocab, 4)
        cfg = BeamConfig(beam_size=500, ctc_weight=float(rng.uniform(0.05, 1.0)), max_len=4, end_detect=None)
        oracle = exhaustive_oracle(lat, scorer, cfg, 4).best
        assert label_sync_search(lat, scorer, cfg).best.tokens == oracle, f"label seed {seed}"
        assert time_sync_search(lat, scorer, cfg).best.tokens == oracle, f"time seed {seed}"
    assert time.perf_counter() - start < 60


@criterion(2, "transducer oracle equivalence")
def test_transducer_oracle_equivalence():
    searches = {"graves": graves_search, "tsd": tsd_search, "alsd": alsd_search}
    for seed in range(200):
        rng = np.random.Generator(np.random.PCG64(10_000 + seed))
        T = int(rng.integers(1, 5))
        V = int(rng.integers(1, 4))
        u_cap = int(rng.integers(0, 4))
        sc = random_joint_scorer(rng, T, V, u_cap + 1)
        norm = bool(seed % 2)
        oracle = transducer_oracle(T, sc, u_cap, norm)
        assert abs(math.expm1(oracle.total_logp)) <= 1e-9
        for name, fn in searches.items():
            cfg = TransducerConfig(beam_size=200, variant=name, n_step=3, u_cap=u_cap, length_normalize=norm)
            assert fn(T, sc, cfg).best.tokens == oracle.best, f"{name} seed {seed}"


@criterion(3, "CTC forward and prefix finalization")
def test_ctc_correctness():
    count = 0
    for lat, labels, symbols in grid_cases():
        expected = brute_force_logp(lat, labels, symbols)
        got = ctc_forward(lat, labels)
        assert is_impossible(got) if is_impossible(expected) else abs(got - expected) <= 1e-6
        count += 1
    assert count == 95
    for seed in range(500):
        lat, labels = random_case(seed)
        ref = ctc_forward(lat, labels)
        final = ctc_prefix_state_for(lat, labels).final_logp()
        assert is_impossible(final) if is_impossible(ref) else abs(final - ref) <= 1e-6


@criterion(4, "streaming degeneracy and no retraction")
def test_streaming_degeneracy():
    for seed in range(100):
        lat, sc, _ = generate_synthetic(random_planted_spec(seed, 10, 3, 7, noise_logp=1.0, frames_per_token=3))
        cfg = BeamConfig(beam_size=4)
        T = lat.num_frames
        for engine, offline in (("label_sync", label_sync_search), ("time_sync", time_sync_search)):
            got, _, _ = checked_stream(lat, sc, cfg, StreamPolicy(engine, HoldN(0), T + seed % 3))
            assert got.tokens == offline(lat, sc, cfg).best.tokens, f"{engine} seed {seed}"
            # genuinely incremental sessions on the same fixture
            checked_stream(lat, sc, cfg, StreamPolicy(engine, HoldN(seed % 3), 1 + seed % 5))
            checked_stream(lat, sc, cfg, StreamPolicy(engine, LocalAgreement(2), 2 + seed % 4))

        rng = np.random.default_rng(seed)
        Tt = int(rng.integers(1, 9))
        joint = random_joint_scorer(rng, Tt, 3, 6)
        tcfg = TransducerConfig(beam_size=4)
        got, _, _ = checked_stream(Tt, joint, tcfg, StreamPolicy("transducer_tsd", HoldN(0), Tt + seed % 3))
        assert got.tokens == tsd_search(Tt, joint, tcfg).best.tokens, f"transducer seed {seed}"
        checked_stream(Tt, joint, tcfg, StreamPolicy("transducer_tsd", HoldN(seed % 2), 1 + seed % 3))


def latency_fixtures():
    return [generate_synthetic(random_planted_spec(1000 + s, 12, 8, 12, frames_per_token=6)) for s in range(50)]


@criterion(5, "smaller blocks lag less at equal quality")
def test_latency_ordering():
    fixtures = latency_fixtures()
    refs = [ref for _, _, ref in fixtures]
    al, bleu = {}, {}
    for block in (20, 40):
        records, hyps = [], []
        for lat, sc, _ in fixtures:
            result, rec, _ = checked_stream(lat, sc, BeamConfig(beam_size=4),
                                            StreamPolicy("time_sync", HoldN(0), block))
            records.append(rec)
            hyps.append(" ".join(result.words))
        al[block] = corpus_al(records)
        bleu[block] = corpus_bleu(hyps, refs).bleu
    assert al[20] < al[40]
    assert bleu[20] == pytest.approx(100.0) and bleu[40] == pytest.approx(100.0)


@criterion(6, "time-sync finalizes no later than label-sync")
def test_time_sync_boundary_no_later():
    early = 0
    for seed in range(100):
        lat, sc, _ = generate_synthetic(random_planted_spec(2000 + seed, 12, 3, 8, frames_per_token=3,
                                                            trailing_blanks=30))
        cfg = BeamConfig(beam_size=4)
        t_res, _, t_sess = checked_stream(lat, sc, cfg, StreamPolicy("time_sync", HoldN(0), 4))
        l_res, _, l_sess = checked_stream(lat, sc, cfg, StreamPolicy("label_sync", HoldN(0), 4))
        assert t_sess.frames_consumed <= l_sess.frames_consumed, f"seed {seed}"
        assert t_res.tokens == l_res.tokens, f"seed {seed}"
        early += t_sess.frames_consumed < lat.num_frames
    assert early > 0  # the planted silence is actually detected


@criterion(7, "BLEU fixture and AL hand examples")
def test_metrics():
    hyps, refs, expected = load_bleu_fixture()
    for name, sl in SLICES.items():
        assert abs(corpus_bleu(hyps[sl], refs[sl]).bleu - expected[name]["bleu"]) <= 0.01, name
    assert average_lagging(LatencyRecord((10,) * 6, 10, 6)) == 10
    X = 9
    assert average_lagging(LatencyRecord(tuple(range(1, X + 1)), X, X)) == 1.0


@criterion(8, "MBR matches brute force; consensus wins")
def test_mbr():
    for cands in all_small_pools():
        for cfg in (MbrConfig(), MbrConfig(weighting="score_softmax", temperature=0.7)):
            got = [r.candidate for r in mbr_rank(cands, cfg)]
            assert got == [cands[i] for i, _ in mbr_bruteforce(cands, mbr_weights(cands, cfg))]
    shared = ("a", "b", "c", "d")
    cands = [Candidate(shared, -2.0, s, 0) for s in range(3)] + [Candidate(("d", "c"), -0.1, 3, 0)]
    assert mbr_rank(cands)[0].candidate.words == shared


@criterion(9, "CLI joint-time decode at T=1000, V=256, beam 8")
def test_performance_smoke(tmp_path):
    rng = np.random.default_rng(0)
    ids = list(range(2, 254))  # ordinary words of a 256-entry vocabulary
    planted = [int(rng.choice(ids))]
    while len(planted) < 250:
        tok = int(rng.choice(ids))
        if tok != planted[-1]:
            planted.append(tok)
    lat, sc, _ = generate_synthetic(SyntheticSpec(256, tuple(planted), frames_per_token=4, noise_logp=0.3, seed=1))
    assert lat.num_frames == 1000 and len(lat.vocab) == 256
    save_lattice(lat, tmp_path / "lattice.blat")
    sc.save(tmp_path / "scorer.json")
    cmd = [sys.executable, "-m", "stsearch", "decode", "--mode", "joint-time", "--lattice",
           str(tmp_path / "lattice.blat"), "--scorer", str(tmp_path / "scorer.json"), "--beam", "8"]
    start = time.perf_counter()
    proc = subprocess.run(cmd, capture_output=True, text=True)
    elapsed = time.perf_counter() - start
    assert proc.returncode == 0, proc.stderr
    assert elapsed < 2.0, f"{elapsed:.2f} s"
