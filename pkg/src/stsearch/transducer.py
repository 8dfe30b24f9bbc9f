"""Transducer decoding: greedy, Graves prefix search, time-synchronous and alignment-synchronous."""

from __future__ import annotations

import bisect
import heapq
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import NEG_INF, DomainError, NBestEntry, NBestList, is_impossible, log_add, ranking_key
from .scorers import JointScorer

VARIANTS = ("greedy", "graves", "tsd", "alsd")


@dataclass(frozen=True)
class TransducerConfig:
    beam_size: int = 4
    variant: str = "tsd"
    n_step: int = 3
    u_cap: int | None = None  # None: T * n_step
    length_normalize: bool = True
    nbest: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown transducer variant {self.variant!r}")
        if self.n_step < 1:
            raise DomainError("n_step must be >= 1")
        if self.beam_size < 1:
            raise DomainError("beam_size must be >= 1")
        if not 1 <= self.nbest <= self.beam_size:
            raise DomainError("nbest must satisfy 1 <= nbest <= beam_size")
        if self.u_cap is not None and self.u_cap < 0:
            raise DomainError("u_cap must be non-negative")

    def resolve_u_cap(self, num_frames: int) -> int:
        return num_frames * self.n_step if self.u_cap is None else self.u_cap


def step_distribution(scorer: JointScorer, t: int, u: int, prefix: tuple[int, ...], u_cap: int) -> np.ndarray:
    """Joint row at ``(t, u)``; once ``u`` reaches the output cap only blank remains (log 1)."""
    if u >= u_cap:
        row = np.full(scorer.vocab_size + 1, NEG_INF)
        row[-1] = 0.0
        return row
    return scorer.score(t, u, prefix)


def final_score(logp: float, length: int, config: TransducerConfig) -> float:
    return logp / max(length, 1) if config.length_normalize else logp


def _nbest(hyps: dict, T: int, config: TransducerConfig) -> NBestList:
    entries = [NBestEntry(y, final_score(s, len(y), config), d, True) for y, (s, d) in hyps.items()]
    return NBestList.build(entries, T, config.nbest)


def _prune(hyps: dict, k: int) -> dict:
    ordered = sorted(hyps.items(), key=lambda kv: ranking_key(kv[0], kv[1][0]))
    return dict(ordered[:k])


def _merge(store: dict, tokens: tuple[int, ...], score: float, delays: tuple[int, ...]) -> None:
    cur = store.get(tokens)
    if cur is None:
        store[tokens] = (score, delays)
    else:
        store[tokens] = (log_add(cur[0], score), cur[1])


def _expansions(row: np.ndarray, k: int) -> list[int]:
    tokens = row[:-1]
    order = sorted(range(tokens.size), key=lambda i: (-tokens[i], i))[:k]
    return [i for i in order if not is_impossible(tokens[i])]


def transducer_greedy(T: int, scorer: JointScorer, config: TransducerConfig = TransducerConfig(variant="greedy")) -> NBestEntry:
    """Per frame, emit the argmax token until blank wins or ``n_step`` symbols were emitted."""
    if T < 1:
        raise DomainError("T must be >= 1")
    u_cap = config.resolve_u_cap(T)
    tokens: list[int] = []
    delays: list[int] = []
    score = 0.0
    blank = scorer.vocab_size
    for t in range(T):
        for _ in range(config.n_step):
            row = step_distribution(scorer, t, len(tokens), tuple(tokens), u_cap)
            k = int(np.argmax(row))
            if k == blank:
                score += float(row[blank])
                break
            tokens.append(k)
            delays.append(t)
            score += float(row[k])
        else:
            row = step_distribution(scorer, t, len(tokens), tuple(tokens), u_cap)
            score += float(row[blank])
    return NBestEntry(tuple(tokens), score, tuple(delays), True)


def _greedy_nbest(T, scorer, config) -> NBestList:
    e = transducer_greedy(T, scorer, config)
    return NBestList((NBestEntry(e.tokens, final_score(e.score, len(e.tokens), config), e.delays),), T)


def graves_search(T: int, scorer: JointScorer, config: TransducerConfig) -> NBestList:
    """Graves (2012) beam search with the prefix-sum rule across hypotheses of a frame."""
    if T < 1:
        raise DomainError("T must be >= 1")
    if config.beam_size == 1:
        return _greedy_nbest(T, scorer, config)
    W = config.beam_size
    u_cap = config.resolve_u_cap(T)
    blank = scorer.vocab_size
    B: dict[tuple[int, ...], tuple[float, tuple[int, ...]]] = {(): (0.0, ())}
    for t in range(T):
        by_len = sorted(B, key=len)
        A = {}
        for y in by_len:
            acc = B[y][0]
            for yhat in by_len:
                if len(yhat) >= len(y):
                    break
                if y[:len(yhat)] != yhat:
                    continue
                lp = B[yhat][0]
                for u in range(len(yhat), len(y)):
                    lp += float(step_distribution(scorer, t, u, y[:u], u_cap)[y[u]])
                acc = log_add(acc, lp)
            A[y] = (acc, B[y][1])
        original = set(A)
        heap = [(ranking_key(y, s), y) for y, (s, _) in A.items()]
        heapq.heapify(heap)
        nxt: dict = {}
        b_scores: list[float] = []  # ascending
        while heap:
            _, ystar = heap[0]
            p, delays = A[ystar]
            better = len(b_scores) - bisect.bisect_right(b_scores, p)
            if better >= W:
                break
            heapq.heappop(heap)
            row = step_distribution(scorer, t, len(ystar), ystar, u_cap)
            s = float(p + row[blank])
            nxt[ystar] = (s, delays)
            bisect.insort(b_scores, s)
            for k in range(blank):
                if is_impossible(row[k]):
                    continue
                yk = ystar + (k,)
                if yk in original or yk in A:
                    continue
                A[yk] = (float(p + row[k]), delays + (t,))
                heapq.heappush(heap, (ranking_key(yk, A[yk][0]), yk))
        B = _prune(nxt, W)
    return _nbest(B, T, config)


class TsdDecoder:
    """Time-synchronous transducer beam search; the beam carries over :meth:`advance` calls."""

    def __init__(self, scorer: JointScorer, config: TransducerConfig, u_cap: int | None = None):
        self.scorer = scorer
        self.config = config
        self.u_cap = config.resolve_u_cap(scorer.num_frames) if u_cap is None else u_cap
        self.frames_seen = 0
        self.beam: dict[tuple[int, ...], tuple[float, tuple[int, ...]]] = {(): (0.0, ())}

    def advance(self, n_frames: int) -> None:
        for _ in range(n_frames):
            self._step(self.frames_seen)
            self.frames_seen += 1

    def _step(self, t: int) -> None:
        cfg = self.config
        blank = self.scorer.vocab_size
        A: dict = {}
        C = self.beam
        for v in range(cfg.n_step + 1):
            D: dict = {}
            for y, (s, d) in C.items():
                row = step_distribution(self.scorer, t, len(y), y, self.u_cap)
                _merge(A, y, s + float(row[blank]), d)
                if v < cfg.n_step:
                    for k in _expansions(row, cfg.beam_size):
                        _merge(D, y + (k,), s + float(row[k]), d + (t,))
            C = _prune(D, cfg.beam_size)
            if not C:
                break
        self.beam = _prune(A, cfg.beam_size)

    def restrict(self, committed: Sequence[int]) -> None:
        committed = tuple(committed)
        self.beam = {y: v for y, v in self.beam.items() if y[:len(committed)] == committed}
        if not self.beam:
            raise DomainError("no live hypothesis extends the committed prefix")

    def ranked(self) -> list[NBestEntry]:
        entries = [NBestEntry(y, final_score(s, len(y), self.config), d) for y, (s, d) in self.beam.items()]
        return sorted(entries, key=lambda e: ranking_key(e.tokens, e.score))

    def nbest(self) -> NBestList:
        return _nbest(self.beam, self.frames_seen, self.config)


def tsd_search(T: int, scorer: JointScorer, config: TransducerConfig) -> NBestList:
    if T < 1:
        raise DomainError("T must be >= 1")
    if config.beam_size == 1:
        return _greedy_nbest(T, scorer, config)
    dec = TsdDecoder(scorer, config, config.resolve_u_cap(T))
    dec.advance(T)
    return dec.nbest()


def alsd_search(T: int, scorer: JointScorer, config: TransducerConfig) -> NBestList:
    """Alignment-length synchronous search: wave ``i`` holds hypotheses with t + u = i."""
    if T < 1:
        raise DomainError("T must be >= 1")
    if config.beam_size == 1:
        return _greedy_nbest(T, scorer, config)
    u_cap = config.resolve_u_cap(T)
    blank = scorer.vocab_size
    B: dict = {(): (0.0, ())}
    finished: dict = {}
    for i in range(T + u_cap):
        A: dict = {}
        for y, (s, d) in B.items():
            u = len(y)
            t = i - u
            row = step_distribution(scorer, t, u, y, u_cap)
            if t == T - 1:
                _merge(finished, y, s + float(row[blank]), d)
            else:
                _merge(A, y, s + float(row[blank]), d)
            if u < u_cap:
                for k in _expansions(row, config.beam_size):
                    _merge(A, y + (k,), s + float(row[k]), d + (t,))
        B = _prune(A, config.beam_size)
        if not B:
            break
    return _nbest(finished if finished else B, T, config)


def transducer_search(T: int, scorer: JointScorer, config: TransducerConfig) -> NBestList:
    if config.variant == "greedy":
        return _greedy_nbest(T, scorer, config)
    return {"graves": graves_search, "tsd": tsd_search, "alsd": alsd_search}[config.variant](T, scorer, config)
