"""Offline joint CTC/attention beam searches and the two-stage multi-decoder pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (NEG_INF, DecodeError, DomainError, NBestEntry, NBestList, PosteriorLattice,
                   VocabMismatchError, Vocabulary, is_impossible, ranking_key)
from .ctc import CtcPrefixState, EndDetectConfig, ctc_prefix_extend_batch, ctc_prefix_state_for, end_detect
from .scorers import PrefixScorer


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 4
    ctc_weight: float = 0.3
    length_bonus: float = 0.0
    max_len_ratio: float = 1.0
    nbest: int = 1
    length_normalize: bool = False
    max_len: int | None = None  # overrides max_len_ratio when set
    end_detect: EndDetectConfig | None = field(default_factory=EndDetectConfig)

    def __post_init__(self):
        if self.beam_size < 1:
            raise DomainError("beam_size must be >= 1")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise DomainError("ctc_weight must lie in [0, 1]")
        if not 1 <= self.nbest <= self.beam_size:
            raise DomainError("nbest must satisfy 1 <= nbest <= beam_size")
        if self.max_len_ratio <= 0:
            raise DomainError("max_len_ratio must be positive")
        if self.max_len is not None and self.max_len < 0:
            raise DomainError("max_len must be non-negative")

    def resolve_max_len(self, num_frames: int) -> int:
        if self.max_len is not None:
            return self.max_len
        return max(1, int(self.max_len_ratio * num_frames))


def check_vocab(lattice_vocab: Vocabulary, scorer: PrefixScorer) -> None:
    if scorer.vocab != lattice_vocab:
        raise VocabMismatchError("scorer vocabulary does not match the lattice vocabulary")


def combine(ctc_logp, att_logp, length, config: BeamConfig):
    """Joint score; a CTC-impossible sequence stays impossible whenever CTC has weight."""
    lam = config.ctc_weight
    score = lam * np.asarray(ctc_logp) + (1.0 - lam) * np.asarray(att_logp) + config.length_bonus * np.asarray(length)
    if lam > 0:
        score = np.where(is_impossible(ctc_logp), NEG_INF, score)
    return score if np.ndim(score) else float(score)


def normalized(score: float, length: int, config: BeamConfig) -> float:
    return score / max(length, 1) if config.length_normalize else score


def top_candidates(scores: np.ndarray, k: int, tie_key: Callable[[int], tuple]) -> list[int]:
    """Indices of the ``k`` best finite scores under the shared tie-break.

    Everything tied with the k-th score is kept for the exact Python sort, so the result
    does not depend on numpy's partition order.
    """
    valid = np.flatnonzero(scores > -np.inf)
    if valid.size == 0:
        return []
    if valid.size > k:
        kth = np.partition(scores[valid], valid.size - k)[valid.size - k]
        valid = valid[scores[valid] >= kth]
    return sorted(valid.tolist(), key=tie_key)[:k]


@dataclass
class _LabelHyp:
    tokens: tuple[int, ...]
    att: float
    state: CtcPrefixState
    score: float


def label_sync_search(lattice: PosteriorLattice, scorer: PrefixScorer, config: BeamConfig,
                      prefix: Sequence[int] = ()) -> NBestList:
    """Attention-primary search advancing one output token per step.

    ``prefix`` forces every hypothesis to extend the given tokens (used for streaming
    re-decoding from a committed prefix). Returns finished hypotheses, or the best
    unfinished one flagged ``finished=False`` when nothing reached eos.
    """
    check_vocab(lattice.vocab, scorer)
    T = lattice.num_frames
    if T == 0:
        raise DomainError("cannot search an empty lattice")
    vocab = lattice.vocab
    eos = vocab.eos_id
    max_len = max(config.resolve_max_len(T), len(prefix))
    all_cands = np.append(vocab.emittable, eos)

    prefix = tuple(int(p) for p in prefix)
    att = 0.0
    for i, tok in enumerate(prefix):
        att += float(scorer.score(prefix[:i], T)[tok])
    state = ctc_prefix_state_for(lattice, prefix, T)
    root = _LabelHyp(prefix, att, state, combine(state.prefix_logp, att, len(prefix), config))

    running = [root]
    ended: list[NBestEntry] = []
    profile: dict[int, float] = {}
    detect = config.end_detect if config.end_detect and max_len >= config.end_detect.window_lengths else None

    for step in range(len(prefix), max_len + 1):
        cands = all_cands if step < max_len else np.array([eos])
        is_eos = cands == eos
        psi, successor = ctc_prefix_extend_batch([h.state for h in running], cands, T)
        att_rows = np.stack([scorer.score(h.tokens, T)[cands] for h in running])
        att_new = np.array([h.att for h in running])[:, None] + att_rows
        lengths = step + (~is_eos).astype(np.int64)
        scores = combine(psi, att_new, lengths[None, :], config)
        flat = scores.ravel()
        C = cands.size

        def tie(i, C=C, cands=cands, is_eos=is_eos):
            h, j = divmod(i, C)
            toks = running[h].tokens if is_eos[j] else running[h].tokens + (int(cands[j]),)
            return ranking_key(toks, float(flat[i]))

        chosen = top_candidates(flat, config.beam_size, tie)
        next_running = []
        for i in chosen:
            h, j = divmod(i, C)
            hyp = running[h]
            if is_eos[j]:
                score = float(flat[i])
                if is_impossible(score):
                    continue  # ending with zero probability is not a finish
                ended.append(NBestEntry(hyp.tokens, normalized(score, len(hyp.tokens), config),
                                        (T,) * len(hyp.tokens), True))
                profile[len(hyp.tokens)] = max(profile.get(len(hyp.tokens), NEG_INF), score)
            else:
                next_running.append(_LabelHyp(hyp.tokens + (int(cands[j]),), float(att_new[h, j]),
                                              successor(h, j), float(flat[i])))
        if not next_running:
            break
        running = next_running
        if detect and profile and end_detect(profile, detect):
            break

    if ended:
        return NBestList.build(ended, T, config.nbest)
    fallback = [NBestEntry(h.tokens, h.score, (T,) * len(h.tokens), False) for h in running]
    return NBestList.build(fallback, T, config.nbest)


@dataclass
class TimeSyncHyp:
    tokens: tuple[int, ...]
    log_blank: float
    log_nonblank: float
    att: float
    delays: tuple[int, ...]

    @property
    def ctc_logp(self) -> float:
        return float(np.logaddexp(self.log_blank, self.log_nonblank))


class TimeSyncDecoder:
    """Frame-synchronous CTC prefix beam search with attention fused at extension time.

    The beam is carried across :meth:`advance` calls, so the same object serves offline
    decoding and blockwise streaming.
    """

    def __init__(self, vocab: Vocabulary, scorer: PrefixScorer, config: BeamConfig,
                 max_len: int | None = None):
        check_vocab(vocab, scorer)
        self.vocab = vocab
        self.scorer = scorer
        self.config = config
        self.max_len = max_len
        self.frames_seen = 0
        self.beam = [TimeSyncHyp((), 0.0, NEG_INF, 0.0, ())]
        self.emit = vocab.emittable
        self._emit_pos = {int(c): i for i, c in enumerate(self.emit)}
        # frame index -> best non-blank-ending CTC mass relative to the best total mass
        self.end_profile: dict[int, float] = {}

    def advance(self, frames: np.ndarray) -> None:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != len(self.vocab):
            raise DomainError(f"block must be n x {len(self.vocab)}")
        for row in frames:
            self._step(row)

    def _step(self, x: np.ndarray) -> None:
        cfg = self.config
        beam = self.beam
        B, E = len(beam), self.emit.size
        t = self.frames_seen + 1  # frames visible after this one
        pb = np.array([h.log_blank for h in beam])
        pnb = np.array([h.log_nonblank for h in beam])
        last = np.array([h.tokens[-1] if h.tokens else -1 for h in beam])
        lens = np.array([len(h.tokens) for h in beam])
        att = np.array([h.att for h in beam])
        total = np.logaddexp(pb, pnb)

        stay_b = np.maximum(total + x[self.vocab.blank_id], NEG_INF)
        stay_nb = np.where(last >= 0, pnb + x[np.maximum(last, 0)], NEG_INF)
        base = np.where(last[:, None] == self.emit[None, :], pb[:, None], total[:, None])
        ext_nb = np.maximum(base + x[self.emit][None, :], NEG_INF)
        if self.max_len is not None:
            ext_nb[lens >= self.max_len] = NEG_INF

        index = {h.tokens: i for i, h in enumerate(beam)}
        for i, h in enumerate(beam):
            if not h.tokens:
                continue
            j = index.get(h.tokens[:-1])
            if j is not None:
                e = self._emit_pos[h.tokens[-1]]
                stay_nb[i] = np.logaddexp(stay_nb[i], ext_nb[j, e])
                ext_nb[j, e] = NEG_INF
        stay_nb = np.maximum(stay_nb, NEG_INF)
        stay_total = np.logaddexp(stay_b, stay_nb)

        att_rows = np.stack([self.scorer.score(h.tokens, t)[self.emit] for h in beam])
        ext_att = att[:, None] + att_rows
        stay_score = combine(stay_total, att, lens, cfg)
        ext_score = combine(ext_nb, ext_att, (lens + 1)[:, None], cfg)

        mass = np.concatenate([stay_total, ext_nb.ravel()])
        scores = np.concatenate([stay_score, ext_score.ravel()])
        feasible = ~is_impossible(mass)
        if feasible.any():
            scores = np.where(feasible, scores, -np.inf)

        def tokens_of(i):
            if i < B:
                return beam[i].tokens
            j, e = divmod(i - B, E)
            return beam[j].tokens + (int(self.emit[e]),)

        chosen = top_candidates(scores, cfg.beam_size, lambda i: ranking_key(tokens_of(i), float(scores[i])))
        new_beam = []
        for i in chosen:
            if i < B:
                h = beam[i]
                new_beam.append(TimeSyncHyp(h.tokens, float(stay_b[i]), float(stay_nb[i]), h.att, h.delays))
            else:
                j, e = divmod(i - B, E)
                h = beam[j]
                new_beam.append(TimeSyncHyp(h.tokens + (int(self.emit[e]),), NEG_INF, float(ext_nb[j, e]),
                                            float(ext_att[j, e]), h.delays + (t,)))
        self.beam = new_beam
        self.frames_seen = t
        self._record_end_evidence()

    def _record_end_evidence(self) -> None:
        best = self.ranked(final=False)[0]
        if not best.tokens:
            return
        nb = max(h.log_nonblank for h in self.beam)
        tot = max(h.ctc_logp for h in self.beam)
        self.end_profile[self.frames_seen] = max(nb - tot, NEG_INF)

    def restrict(self, committed: Sequence[int]) -> None:
        """Drop hypotheses that do not extend the committed prefix."""
        committed = tuple(committed)
        kept = [h for h in self.beam if h.tokens[:len(committed)] == committed]
        if not kept:
            raise DecodeError("no live hypothesis extends the committed prefix")
        self.beam = kept

    def ranked(self, final: bool) -> list[NBestEntry]:
        """Beam ranked by prefix score, or by complete-sequence score when ``final``."""
        cfg = self.config
        entries = []
        for h in self.beam:
            if final:
                eos = float(self.scorer.score(h.tokens, self.frames_seen)[self.vocab.eos_id])
                score = combine(h.ctc_logp, h.att + eos, len(h.tokens), cfg)
                score = normalized(score, len(h.tokens), cfg)
            else:
                score = combine(h.ctc_logp, h.att, len(h.tokens), cfg)
            entries.append(NBestEntry(h.tokens, float(score), h.delays, final))
        return sorted(entries, key=lambda e: ranking_key(e.tokens, e.score))

    def nbest(self) -> NBestList:
        return NBestList.build(self.ranked(final=True), self.frames_seen, self.config.nbest)


def time_sync_search(lattice: PosteriorLattice, scorer: PrefixScorer, config: BeamConfig) -> NBestList:
    """CTC-primary search advancing one source frame per step."""
    check_vocab(lattice.vocab, scorer)
    T = lattice.num_frames
    if T == 0:
        raise DomainError("cannot search an empty lattice")
    decoder = TimeSyncDecoder(lattice.vocab, scorer, config, config.resolve_max_len(T))
    decoder.advance(lattice.frames)
    return decoder.nbest()


class StageError(DecodeError):
    def __init__(self, stage: int, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.code = getattr(cause, "code", "DATA")


def multi_decoder_search(stage1: tuple[PosteriorLattice, PrefixScorer, BeamConfig],
                         stage2_factory: Callable[[tuple[int, ...]], PrefixScorer],
                         config2: BeamConfig,
                         stage2_lattice: PosteriorLattice | None = None) -> tuple[NBestList, NBestList]:
    """Decode the intermediate sequence first, then condition the second decoder on its top-1.

    The second stage runs joint CTC/attention over ``stage2_lattice`` (default: the
    stage-1 lattice) with the scorer built from the stage-1 best tokens.
    """
    lattice, scorer, config1 = stage1
    try:
        first = label_sync_search(lattice, scorer, config1)
    except Exception as exc:
        raise StageError(1, exc) from exc
    try:
        scorer2 = stage2_factory(first.best.tokens)
        second = label_sync_search(stage2_lattice or lattice, scorer2, config2)
    except Exception as exc:
        raise StageError(2, exc) from exc
    return first, second
