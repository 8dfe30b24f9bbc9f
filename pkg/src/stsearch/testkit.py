"""Exhaustive oracles and seeded synthetic fixtures.

The oracles share no code with the searches they check: the offline oracle scores every
sequence with :func:`ctc_forward`, and the transducer oracle walks every blank/emit path.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import NEG_INF, PosteriorLattice, SearchSpaceError, Vocabulary, clamp, ranking_key
from .ctc import ctc_forward
from .scorers import JointScorer, PrefixScorer, TableJointScorer, TrieScorer
from .search import BeamConfig, combine, normalized

MAX_SPACE = 10**6


@dataclass(frozen=True)
class OracleResult:
    best: tuple[int, ...]
    best_score: float
    ranking: list[tuple[tuple[int, ...], float]]
    total_logp: float | None = None  # transducer oracle only: log of all path mass


def exhaustive_oracle(lattice: PosteriorLattice, scorer: PrefixScorer, config: BeamConfig,
                      max_len: int) -> OracleResult:
    """Score every sequence up to ``max_len`` with the joint definition and rank them all."""
    vocab = lattice.vocab
    alphabet = [int(i) for i in vocab.emittable]
    space = sum(len(alphabet) ** n for n in range(max_len + 1))
    if space > MAX_SPACE:
        raise SearchSpaceError(f"{space} sequences exceed the enumeration limit of {MAX_SPACE}")
    T = lattice.num_frames
    scored = []
    for n in range(max_len + 1):
        for seq in itertools.product(alphabet, repeat=n):
            att = 0.0
            for i in range(n):
                att += float(scorer.score(seq[:i], T)[seq[i]])
            att += float(scorer.score(seq, T)[vocab.eos_id])
            score = combine(ctc_forward(lattice, seq), att, n, config)
            scored.append((seq, normalized(score, n, config)))
    scored.sort(key=lambda item: ranking_key(*item))
    return OracleResult(scored[0][0], scored[0][1], scored)


def _path_count(T: int, V: int, u_cap: int) -> int:
    return sum(V**n * math.comb(n + T - 1, n) for n in range(u_cap + 1))


def transducer_oracle(T: int, scorer: JointScorer, u_cap: int, length_normalize: bool = False) -> OracleResult:
    """Enumerate every blank/emit path, marginalize onto label sequences, rank exactly.

    Emission stops at ``u_cap`` tokens, after which blank is certain.
    """
    V = scorer.vocab_size
    if _path_count(T, V, u_cap) > MAX_SPACE:
        raise SearchSpaceError("transducer alignment space too large to enumerate")
    paths: dict[tuple[int, ...], list[float]] = {}

    def walk(t, prefix, logp):
        u = len(prefix)
        row = scorer.score(t, u, prefix)
        blank_lp = 0.0 if u >= u_cap else float(row[V])
        if t == T - 1:
            paths.setdefault(prefix, []).append(logp + blank_lp)
        else:
            walk(t + 1, prefix, logp + blank_lp)
        if u < u_cap:
            for k in range(V):
                walk(t, prefix + (k,), logp + float(row[k]))

    walk(0, (), 0.0)
    ranking = []
    for seq, lps in paths.items():
        logp = float(np.logaddexp.reduce(lps))
        ranking.append((seq, logp / max(len(seq), 1) if length_normalize else logp))
    ranking.sort(key=lambda item: ranking_key(*item))
    total = float(np.logaddexp.reduce([lp for lps in paths.values() for lp in lps]))
    return OracleResult(ranking[0][0], ranking[0][1], ranking, total)


@dataclass(frozen=True)
class SyntheticSpec:
    vocab_size: int  # total V including <blank>, <unk>, <sos>, <eos>
    planted_sequence: tuple[int, ...]
    frames_per_token: int = 2
    noise_logp: float = 0.0
    seed: int = 0
    leading_blanks: int = 0
    trailing_blanks: int = 0
    att_confidence: float = 0.9


def synthetic_vocab(vocab_size: int) -> Vocabulary:
    if vocab_size < 5:
        raise ValueError("synthetic vocabularies need at least one ordinary token (V >= 5)")
    words = [f"w{i}" for i in range(vocab_size - 4)]
    return Vocabulary(("<blank>", "<unk>", *words, "<sos>", "<eos>"), 0, vocab_size - 2, vocab_size - 1, 1)


def attention_row(vocab: Vocabulary, favourite: int, confidence: float) -> np.ndarray:
    """``confidence`` on one token, the rest spread over emittable tokens and eos."""
    allowed = [*map(int, vocab.emittable), vocab.eos_id]
    row = np.full(len(vocab), NEG_INF)
    if len(allowed) == 1:
        row[favourite] = 0.0
        return row
    row[allowed] = math.log((1 - confidence) / (len(allowed) - 1))
    row[favourite] = math.log(confidence)
    return row


def uniform_attention_row(vocab: Vocabulary) -> np.ndarray:
    allowed = [*map(int, vocab.emittable), vocab.eos_id]
    row = np.full(len(vocab), NEG_INF)
    row[allowed] = -math.log(len(allowed))
    return row


def generate_synthetic(spec: SyntheticSpec) -> tuple[PosteriorLattice, TrieScorer, str]:
    """Planted-sequence lattice, a trie scorer that prefers it, and its reference string."""
    vocab = synthetic_vocab(spec.vocab_size)
    emittable = set(map(int, vocab.emittable))
    for tok in spec.planted_sequence:
        if tok not in emittable:
            raise ValueError(f"planted token {tok} is not an emittable id")
    targets = [vocab.blank_id] * spec.leading_blanks
    prev = None
    for tok in spec.planted_sequence:
        if tok == prev:
            targets.append(vocab.blank_id)
        targets.extend([tok] * spec.frames_per_token)
        prev = tok
    targets.extend([vocab.blank_id] * spec.trailing_blanks)

    rng = np.random.Generator(np.random.PCG64(spec.seed))
    V = spec.vocab_size
    eps = -math.expm1(-spec.noise_logp)
    probs = np.zeros((len(targets), V))
    for t, tgt in enumerate(targets):
        spread = rng.random(V)
        spread[tgt] = 0.0
        spread /= spread.sum()
        probs[t] = eps * spread
        probs[t, tgt] = 1.0 - eps
    with np.errstate(divide="ignore"):
        logp = clamp(np.log(probs))
    logp -= np.logaddexp.reduce(logp, axis=1, keepdims=True)
    lattice = PosteriorLattice(clamp(logp), vocab)

    planted = tuple(spec.planted_sequence)
    entries = {}
    for i in range(len(planted) + 1):
        nxt = planted[i] if i < len(planted) else vocab.eos_id
        entries[planted[:i]] = attention_row(vocab, nxt, spec.att_confidence)
    scorer = TrieScorer(vocab, uniform_attention_row(vocab), entries)
    return lattice, scorer, " ".join(vocab.decode(planted))


def random_planted_spec(seed: int, vocab_size: int = 12, min_len: int = 3, max_len: int = 12,
                        **kwargs) -> SyntheticSpec:
    rng = np.random.Generator(np.random.PCG64(seed))
    vocab = synthetic_vocab(vocab_size)
    ids = vocab.emittable[vocab.emittable != vocab.unk_id]
    n = int(rng.integers(min_len, max_len + 1))
    planted = tuple(int(i) for i in rng.choice(ids, size=n))
    return SyntheticSpec(vocab_size, planted, seed=seed, **kwargs)


# random instances for the saturated-beam equivalence suites

def random_lattice(rng: np.random.Generator, vocab: Vocabulary, T: int, alpha: float = 1.0) -> PosteriorLattice:
    probs = rng.dirichlet(np.full(len(vocab), alpha), size=T)
    with np.errstate(divide="ignore"):
        return PosteriorLattice(np.log(probs).reshape(T, len(vocab)), vocab)


def random_trie_scorer(rng: np.random.Generator, vocab: Vocabulary, depth: int) -> TrieScorer:
    """Random distinct next-token distribution for every prefix up to ``depth``."""
    allowed = [*map(int, vocab.emittable), vocab.eos_id]
    alphabet = [int(i) for i in vocab.emittable]

    def row():
        out = np.full(len(vocab), NEG_INF)
        out[allowed] = np.log(rng.dirichlet(np.ones(len(allowed))))
        return out

    entries = {}
    for n in range(depth + 1):
        for seq in itertools.product(alphabet, repeat=n):
            entries[seq] = row()
    return TrieScorer(vocab, row(), entries)


def random_joint_scorer(rng: np.random.Generator, T: int, V: int, u_max: int) -> TableJointScorer:
    rows = {(t, u): np.log(rng.dirichlet(np.ones(V + 1))) for t in range(T) for u in range(u_max + 1)}
    return TableJointScorer(rows, np.log(rng.dirichlet(np.ones(V + 1))), u_max=u_max, num_frames=T)


def small_vocab(n_tokens: int) -> Vocabulary:
    """``n_tokens`` ordinary tokens plus the four specials."""
    return synthetic_vocab(n_tokens + 4)


def mbr_bruteforce(candidates, weights) -> list[tuple[int, float]]:
    """Expected utility by the direct double loop; returns (index, utility) best first.

    Recomputes smoothed sentence BLEU from scratch for every ordered pair, so it shares
    nothing with the cached matrix used by :func:`ensemble.mbr_rank` except the metric.
    """
    from .metrics import sentence_bleu

    utils = []
    for h in candidates:
        terms = [weights[j] * sentence_bleu(list(h.words), list(r.words)) for j, r in enumerate(candidates)]
        utils.append(math.fsum(terms))  # correctly rounded, so exact ties stay ties
    order = sorted(range(len(candidates)),
                   key=lambda i: (-utils[i], -candidates[i].score, candidates[i].words,
                                  candidates[i].system, candidates[i].rank))
    return [(i, utils[i]) for i in order]
