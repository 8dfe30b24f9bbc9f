"""Minimum Bayes risk ranking over pooled n-best lists."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import DomainError, NBestList
from .metrics import MAX_ORDER, brevity_penalty, ngrams

METRICS = ("bleu_sentence",)
WEIGHTINGS = ("uniform", "score_softmax")


@dataclass(frozen=True)
class MbrConfig:
    metric: str = "bleu_sentence"
    weighting: str = "uniform"
    temperature: float = 1.0

    def __post_init__(self):
        if self.metric not in METRICS:
            raise DomainError(f"unknown metric {self.metric!r}")
        if self.weighting not in WEIGHTINGS:
            raise DomainError(f"unknown weighting {self.weighting!r}")
        if self.weighting == "score_softmax" and not self.temperature > 0:
            raise DomainError("score_softmax needs a positive temperature")


@dataclass(frozen=True)
class Candidate:
    words: tuple[str, ...]
    score: float
    system: int
    rank: int  # position inside its system's list

    @property
    def text(self) -> str:
        return " ".join(self.words)


@dataclass(frozen=True)
class RankedCandidate:
    candidate: Candidate
    utility: float


def pool(nbest_lists: Sequence[NBestList], detok: Callable[[tuple[int, ...]], Sequence[str]] | None = None
         ) -> list[Candidate]:
    """Flatten n-best lists into one candidate pool, keeping duplicates across systems."""
    detok = detok or (lambda toks: [str(t) for t in toks])
    out = []
    for s, nb in enumerate(nbest_lists):
        for r, e in enumerate(nb):
            out.append(Candidate(tuple(detok(e.tokens)), float(e.score), s, r))
    return out


def mbr_weights(candidates: Sequence[Candidate], config: MbrConfig) -> np.ndarray:
    n = len(candidates)
    if config.weighting == "uniform":
        return np.full(n, 1.0 / n)
    z = np.array([c.score for c in candidates]) / config.temperature
    z -= z.max()
    w = np.exp(z)
    return w / w.sum()


def tie_break_key(candidate: Candidate):
    return (-candidate.score, candidate.words, candidate.system, candidate.rank)


class _Stats:
    __slots__ = ("length", "grams")

    def __init__(self, words: tuple[str, ...]):
        self.length = len(words)
        self.grams = [ngrams(words, n) for n in range(1, MAX_ORDER + 1)]


def _smoothed_bleu(h: _Stats, r: _Stats) -> float:
    if h.length == 0:
        return 0.0
    log_p = 0.0
    for n, (hg, rg) in enumerate(zip(h.grams, r.grams), 1):
        small, big = (hg, rg) if len(hg) <= len(rg) else (rg, hg)
        m = sum(min(c, big[g]) for g, c in small.items())
        log_p += math.log((m + 1) / (max(h.length - n + 1, 0) + 1))
    return brevity_penalty(h.length, r.length) * math.exp(log_p / MAX_ORDER)


def utility_matrix(candidates: Sequence[Candidate]) -> np.ndarray:
    """``M[i, j] = metric(candidate i, pseudo-reference j)``, each distinct pair computed once."""
    distinct: dict[tuple[str, ...], int] = {}
    index = [distinct.setdefault(c.words, len(distinct)) for c in candidates]
    stats = [_Stats(w) for w in distinct]
    D = len(stats)
    small = np.empty((D, D))
    for i in range(D):
        for j in range(D):
            small[i, j] = _smoothed_bleu(stats[i], stats[j])
    idx = np.array(index)
    return small[np.ix_(idx, idx)]


def mbr_rank(nbest_lists: Sequence[NBestList] | Sequence[Candidate], config: MbrConfig = MbrConfig(),
             detok: Callable[[tuple[int, ...]], Sequence[str]] | None = None) -> list[RankedCandidate]:
    """Rank every pooled candidate by expected utility against the whole pool, self included."""
    if nbest_lists and isinstance(nbest_lists[0], Candidate):
        candidates = list(nbest_lists)
    else:
        candidates = pool(nbest_lists, detok)
    if not candidates:
        raise DomainError("MBR needs at least one candidate")
    w = mbr_weights(candidates, config)
    M = utility_matrix(candidates)
    # row-wise fsum keeps the result independent of BLAS reduction order
    utility = [math.fsum(M[i] * w) for i in range(len(candidates))]
    order = sorted(range(len(candidates)), key=lambda i: (-utility[i], tie_break_key(candidates[i])))
    return [RankedCandidate(candidates[i], utility[i]) for i in order]
