"""Blockwise incremental decoding with stable-prefix commitment.

A session consumes source blocks, re-ranks its hypotheses after each block and writes
only tokens the commit rule deems stable. Written tokens are never retracted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .core import DomainError, PosteriorLattice, StateError, Vocabulary
from .ctc import EndDetectConfig, end_detect
from .metrics import LatencyRecord
from .scorers import JointScorer, PrefixScorer, TableJointScorer
from .search import BeamConfig, TimeSyncDecoder, check_vocab, label_sync_search
from .transducer import TransducerConfig, TsdDecoder

ENGINES = ("label_sync", "time_sync", "transducer_tsd")


@dataclass(frozen=True)
class HoldN:
    """Commit the best hypothesis minus its last ``n`` tokens."""

    n: int = 0

    def __post_init__(self):
        if self.n < 0:
            raise DomainError("hold_n requires n >= 0")


@dataclass(frozen=True)
class LocalAgreement:
    """Commit the longest common prefix of the last ``k`` block decodes."""

    k: int = 2

    def __post_init__(self):
        if self.k < 1:
            raise DomainError("local_agreement requires k >= 1")


CommitRule = Union[HoldN, LocalAgreement]


@dataclass(frozen=True)
class StreamPolicy:
    engine: str = "time_sync"
    commit_rule: CommitRule = HoldN(0)
    block_size: int = 40
    end_detect: EndDetectConfig = field(default_factory=EndDetectConfig)
    keep_full_beam: bool = True

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise DomainError(f"unknown engine {self.engine!r}; expected one of {ENGINES}")
        if self.block_size < 1:
            raise DomainError("block_size must be >= 1")


@dataclass(frozen=True)
class Event:
    type: str  # READ or WRITE
    frames: int = 0  # READ: frames in the block; WRITE: frames consumed at emission
    token: str | None = None
    token_id: int | None = None

    def to_json(self) -> dict:
        if self.type == "READ":
            return {"type": "READ", "frames": self.frames}
        return {"type": "WRITE", "token": self.token, "frames_consumed": self.frames}


@dataclass(frozen=True)
class DecodeResult:
    tokens: tuple[int, ...]
    words: tuple[str, ...]

    @property
    def text(self) -> str:
        return " ".join(self.words)


def _common_prefix(seqs: Sequence[Sequence[int]]) -> tuple[int, ...]:
    out = []
    for column in zip(*seqs):
        if any(c != column[0] for c in column):
            break
        out.append(column[0])
    return tuple(out)


class StreamSession:
    """Single-owner incremental decoding state. Drive it from one caller only."""

    def __init__(self, policy: StreamPolicy, scorer, config, vocab: Vocabulary | None = None):
        self.policy = policy
        self.scorer = scorer
        self.config = config
        self.frames_consumed = 0
        self.committed: list[int] = []
        self.events: list[Event] = []
        self.finished = False
        self.source_exhausted = False
        self.boundary_detected = False
        self._history: list[tuple[int, ...]] = []
        self._best: tuple[int, ...] = ()
        self._stable_blocks = 0

        if policy.engine == "transducer_tsd":
            if not isinstance(scorer, JointScorer) or not isinstance(config, TransducerConfig):
                raise DomainError("transducer_tsd needs a JointScorer and a TransducerConfig")
            self.vocab = vocab
            self._decoder = TsdDecoder(scorer, config)
        else:
            if not isinstance(scorer, PrefixScorer) or not isinstance(config, BeamConfig):
                raise DomainError(f"{policy.engine} needs a PrefixScorer and a BeamConfig")
            self.vocab = vocab or scorer.vocab
            check_vocab(self.vocab, scorer)
            self._frames: list[np.ndarray] = []
            if policy.engine == "time_sync":
                self._decoder = TimeSyncDecoder(self.vocab, scorer, config, config.max_len)

    # token strings ---------------------------------------------------------------

    def _word(self, tok: int) -> str:
        if self.vocab is not None:
            return self.vocab.tokens[tok]
        if isinstance(self.scorer, TableJointScorer):
            return self.scorer.token_strings([tok])[0]
        return str(tok)

    # block processing --------------------------------------------------------------

    def process_block(self, block, is_final: bool = False) -> list[int]:
        """Consume one block, write newly stable tokens and return them.

        A block shorter than ``block_size`` is only legal as the last one and implies
        ``is_final``.
        """
        if self.finished:
            raise StateError("session already finalized")
        if self.source_exhausted:
            raise StateError("the final block was already delivered")
        n = int(block) if isinstance(block, (int, np.integer)) else len(block)
        if n > self.policy.block_size:
            raise DomainError(f"block of {n} frames exceeds block_size={self.policy.block_size}")
        if n < self.policy.block_size:
            is_final = True
        self.frames_consumed += n
        self.events.append(Event("READ", n))
        if is_final:
            self.source_exhausted = True

        engine = self.policy.engine
        if engine == "label_sync":
            self._frames.append(np.asarray(block, dtype=np.float64).reshape(n, len(self.vocab)))
            best = self._label_sync_best()
        elif engine == "time_sync":
            self._decoder.advance(np.asarray(block, dtype=np.float64).reshape(n, len(self.vocab)))
            best = self._decoder.ranked(final=is_final)[0].tokens
        else:
            self._decoder.advance(n)
            best = self._decoder.ranked()[0].tokens

        if engine == "label_sync":
            self._track_label_sync_end(best)
        self._best = best
        new = self._apply_commit_rule(best, final=is_final)
        self._write(new)
        self._prune()
        return new

    def _label_sync_best(self) -> tuple[int, ...]:
        lattice = PosteriorLattice(np.concatenate(self._frames), self.vocab)
        return label_sync_search(lattice, self.scorer, self.config, prefix=self.committed).best.tokens

    def _track_label_sync_end(self, best: tuple[int, ...]) -> None:
        att = self.scorer.score(best, self.frames_consumed)
        wants_end = int(np.argmax(att)) == self.vocab.eos_id
        if wants_end and best == self._best:
            self._stable_blocks += 1
        else:
            self._stable_blocks = 0

    def _apply_commit_rule(self, best: tuple[int, ...], final: bool) -> list[int]:
        rule = self.policy.commit_rule
        done = len(self.committed)
        if final:
            stable = best
        elif isinstance(rule, HoldN):
            stable = best[:max(0, len(best) - rule.n)]
        else:
            self._history.append(best)
            if len(self._history) < rule.k:
                return []
            stable = _common_prefix(self._history[-rule.k:])
        if len(stable) <= done or tuple(stable[:done]) != tuple(self.committed):
            return []
        return list(stable[done:])

    def _write(self, tokens: Sequence[int]) -> None:
        for tok in tokens:
            self.committed.append(int(tok))
            self.events.append(Event("WRITE", self.frames_consumed, self._word(int(tok)), int(tok)))

    def _prune(self) -> None:
        if self.policy.engine == "label_sync":
            return
        self._decoder.restrict(self.committed)
        if not self.policy.keep_full_beam:
            if self.policy.engine == "time_sync":
                best = self._decoder.ranked(final=False)[0].tokens
                self._decoder.beam = [h for h in self._decoder.beam if h.tokens == best]
            else:
                best = self._decoder.ranked()[0].tokens
                self._decoder.beam = {best: self._decoder.beam[best]}

    # boundary and finalization -------------------------------------------------------

    def detect_boundary(self) -> bool:
        if not self.events:
            raise StateError("no block processed yet")
        cfg = self.policy.end_detect
        engine = self.policy.engine
        if self.source_exhausted:
            fired = True
        elif engine == "time_sync":
            profile = self._decoder.end_profile
            fired = bool(profile) and end_detect(profile, cfg)
        elif engine == "label_sync":
            fired = self._stable_blocks >= cfg.window_lengths
        else:
            fired = False
        if fired:
            self.boundary_detected = True
        return fired

    def finalize(self, source_len: int | None = None) -> tuple[DecodeResult, LatencyRecord]:
        if self.finished:
            raise StateError("session already finalized")
        if not (self.source_exhausted or self.boundary_detected):
            raise StateError("finalize needs the final block or a detected boundary")
        engine = self.policy.engine
        if engine == "time_sync":
            best = self._decoder.ranked(final=True)[0].tokens
        elif engine == "transducer_tsd":
            best = self._decoder.ranked()[0].tokens
        else:
            best = self._best
        done = len(self.committed)
        if tuple(best[:done]) == tuple(self.committed):
            self._write(best[done:])
        self.finished = True
        tokens = tuple(self.committed)
        delays = tuple(e.frames for e in self.events if e.type == "WRITE")
        record = LatencyRecord(delays, source_len if source_len is not None else self.frames_consumed,
                               len(tokens))
        return DecodeResult(tokens, tuple(self._word(t) for t in tokens)), record

    def emitted(self) -> list[int]:
        return [e.token_id for e in self.events if e.type == "WRITE"]

    def export_events(self, path) -> None:
        write_event_log(self.events, path)


def open_session(policy: StreamPolicy, scorer, config, vocab: Vocabulary | None = None) -> StreamSession:
    return StreamSession(policy, scorer, config, vocab)


def process_block(session: StreamSession, block, is_final: bool = False) -> list[int]:
    return session.process_block(block, is_final)


def detect_boundary(session: StreamSession) -> bool:
    return session.detect_boundary()


def finalize(session: StreamSession, source_len: int | None = None):
    return session.finalize(source_len)


def write_event_log(events: Sequence[Event], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(e.to_json()) + "\n")


def run_stream(source: PosteriorLattice | int, scorer, config, policy: StreamPolicy,
               use_boundary: bool = True) -> tuple[DecodeResult, LatencyRecord, StreamSession]:
    """Feed a whole utterance block by block, stopping early when a boundary is detected.

    ``source`` is a lattice for the CTC engines or a frame count for the transducer engine.
    """
    if isinstance(source, PosteriorLattice):
        T = source.num_frames
        vocab = source.vocab
        blocks = source.blocks(policy.block_size)
    else:
        T = int(source)
        vocab = None
        blocks = [min(policy.block_size, T - s) for s in range(0, T, policy.block_size)]
    session = open_session(policy, scorer, config, vocab)
    for i, block in enumerate(blocks):
        session.process_block(block, is_final=i == len(blocks) - 1)
        if use_boundary and session.detect_boundary():
            break
    result, record = session.finalize(source_len=T)
    return result, record, session
