"""CTC dynamic programs: sequence likelihood, prefix scoring, greedy decoding, end detection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import NEG_INF, DomainError, PosteriorLattice, clamp, log_add


def _check_labels(lattice: PosteriorLattice, labels: Sequence[int]) -> tuple[int, ...]:
    labels = tuple(int(l) for l in labels)
    V = lattice.vocab_size
    for l in labels:
        if not 0 <= l < V:
            raise DomainError(f"label id {l} outside vocabulary of size {V}")
        if l == lattice.vocab.blank_id:
            raise DomainError("labels must not contain the blank id")
    return labels


def min_frames(labels: Sequence[int]) -> int:
    """Frames needed to emit ``labels``: one per token plus a blank between repeats."""
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def ctc_forward(lattice: PosteriorLattice, labels: Sequence[int]) -> float:
    """log p(labels | lattice) summed over all blank-augmented alignments."""
    labels = _check_labels(lattice, labels)
    T = lattice.num_frames
    if min_frames(labels) > T:
        return NEG_INF
    if T == 0:
        return 0.0
    blank = lattice.vocab.blank_id
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    S = ext.size
    # the skip transition s-2 -> s is allowed into a label that differs from the previous label
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    x = lattice.frames[:, ext]

    alpha = np.full(S, NEG_INF)
    alpha[0] = x[0, 0]
    if S > 1:
        alpha[1] = x[0, 1]
    for t in range(1, T):
        prev = alpha
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha = clamp(acc + x[t])
    if S == 1:
        return float(alpha[0])
    return log_add(alpha[-1], alpha[-2])


@dataclass(frozen=True, eq=False)
class CtcPrefixState:
    """Blank / non-blank prefix masses for one token prefix over the first ``n`` frames.

    ``r_nonblank[t]`` and ``r_blank[t]`` are the log-probabilities that frames ``0..t``
    collapse to ``tokens`` with frame ``t`` emitting the last token or a blank respectively.
    ``prefix_logp`` is the log-probability that ``tokens`` starts the full labeling.
    """

    lattice: PosteriorLattice
    tokens: tuple[int, ...]
    r_nonblank: np.ndarray
    r_blank: np.ndarray
    prefix_logp: float
    parent: "CtcPrefixState | None" = None

    @property
    def frames(self) -> int:
        return self.r_blank.shape[0]

    @property
    def last_token(self) -> int | None:
        return self.tokens[-1] if self.tokens else None

    def at(self, t: int) -> tuple[float, float]:
        """(log p_nonblank, log p_blank) after frame index ``t``."""
        return float(self.r_nonblank[t]), float(self.r_blank[t])

    def final_logp(self) -> float:
        """log p(tokens is the complete labeling of the consumed frames)."""
        n = self.frames
        if n == 0:
            return 0.0 if not self.tokens else NEG_INF
        return log_add(self.r_nonblank[n - 1], self.r_blank[n - 1])


def ctc_prefix_init(lattice: PosteriorLattice, upto_frame: int | None = None) -> CtcPrefixState:
    n = lattice.num_frames if upto_frame is None else upto_frame
    if not 0 <= n <= lattice.num_frames:
        raise DomainError(f"upto_frame={n} outside 0..{lattice.num_frames}")
    r_blank = clamp(np.cumsum(lattice.frames[:n, lattice.vocab.blank_id]))
    return CtcPrefixState(lattice, (), np.full(n, NEG_INF), r_blank, 0.0)


def _extend_many(x: np.ndarray, x_blank: np.ndarray, r_nb: np.ndarray, r_b: np.ndarray,
                 lasts: np.ndarray, empty: np.ndarray, cands: np.ndarray):
    """Score every (prefix, candidate) pair in one pass.

    x: (n, C) candidate log-probs; r_nb, r_b: (H, n); lasts: (H,) last token or -1.
    Returns prefix scores (H, C) and successor masses (n, H, C) each.
    """
    n = x.shape[0]
    H, C = r_nb.shape[0], cands.size
    psi = np.full((H, C), NEG_INF)
    new_nb = np.full((n, H, C), NEG_INF)
    new_b = np.full((n, H, C), NEG_INF)
    if n == 0:
        return psi, new_nb, new_b
    same = lasts[:, None] == cands[None, :]
    # phi[t]: mass that may precede a fresh emission of the candidate at frame t+1
    phi = np.where(same[None], r_b.T[:, :, None],
                   np.logaddexp(r_b.T, r_nb.T)[:, :, None])
    new_nb[0] = np.where(empty[:, None], x[0][None, :], NEG_INF)
    psi[:] = new_nb[0]
    for t in range(1, n):
        new_nb[t] = clamp(np.logaddexp(new_nb[t - 1], phi[t - 1]) + x[t])
        new_b[t] = clamp(np.logaddexp(new_b[t - 1], new_nb[t - 1]) + x_blank[t])
        psi = np.logaddexp(psi, phi[t - 1] + x[t])
    return clamp(psi), new_nb, new_b


def _prepare(states: Sequence[CtcPrefixState], upto: int):
    states = [s if s.frames == upto else advance_state(s, upto) for s in states]
    r_nb = np.stack([s.r_nonblank[:upto] for s in states]) if states else np.zeros((0, upto))
    r_b = np.stack([s.r_blank[:upto] for s in states]) if states else np.zeros((0, upto))
    lasts = np.array([-1 if s.last_token is None else s.last_token for s in states], dtype=np.int64)
    empty = np.array([not s.tokens for s in states], dtype=bool)
    return states, r_nb, r_b, lasts, empty


def ctc_prefix_extend_batch(states: Sequence[CtcPrefixState], candidates: Sequence[int],
                            upto_frame: int | None = None):
    """Vectorized :func:`ctc_prefix_extend` over several prefixes sharing one lattice.

    Returns ``(scores, successor)`` where ``scores`` is (H, C) and ``successor(h, j)``
    builds the state for prefix ``h`` extended by candidate ``j``. The eos candidate
    scores the prefix as a complete labeling and has no successor.
    """
    if not states:
        return np.zeros((0, len(candidates))), None
    lattice = states[0].lattice
    vocab = lattice.vocab
    upto = states[0].frames if upto_frame is None else upto_frame
    if not 0 <= upto <= lattice.num_frames:
        raise DomainError(f"upto_frame={upto} outside 0..{lattice.num_frames}")
    cands = np.asarray(candidates, dtype=np.int64)
    if (cands == vocab.blank_id).any():
        raise DomainError("the blank id cannot extend a prefix")
    if ((cands < 0) | (cands >= lattice.vocab_size)).any():
        raise DomainError("candidate id outside vocabulary")
    states, r_nb, r_b, lasts, empty = _prepare(states, upto)
    eos_mask = cands == vocab.eos_id
    x = lattice.frames[:upto][:, cands]
    x_blank = lattice.frames[:upto, vocab.blank_id]
    psi, new_nb, new_b = _extend_many(x, x_blank, r_nb, r_b, lasts, empty, cands)
    if eos_mask.any():
        finals = np.array([s.final_logp() for s in states])
        psi[:, eos_mask] = finals[:, None]

    def successor(h: int, j: int) -> CtcPrefixState:
        if eos_mask[j]:
            raise DomainError("an eos-terminated prefix has no successor state")
        parent = states[h]
        return CtcPrefixState(lattice, parent.tokens + (int(cands[j]),), new_nb[:, h, j].copy(),
                              new_b[:, h, j].copy(), float(psi[h, j]), parent)

    return psi, successor


def ctc_prefix_extend(state: CtcPrefixState, candidates: Sequence[int], upto_frame: int | None = None):
    """Prefix scores of ``state.tokens + c`` for each candidate, with successor states.

    Returns ``(scores, successors)``; ``successors[j]`` is ``None`` for eos.
    """
    psi, successor = ctc_prefix_extend_batch([state], candidates, upto_frame)
    eos = state.lattice.vocab.eos_id
    succ = [None if int(c) == eos else successor(0, j) for j, c in enumerate(candidates)]
    return psi[0], succ


def advance_state(state: CtcPrefixState, upto_frame: int) -> CtcPrefixState:
    """Recompute ``state`` over ``upto_frame`` frames by replaying its extension chain."""
    if upto_frame == state.frames:
        return state
    if upto_frame < state.frames:
        return CtcPrefixState(state.lattice, state.tokens, state.r_nonblank[:upto_frame],
                              state.r_blank[:upto_frame],
                              _prefix_logp_upto(state, upto_frame), state.parent)
    if state.parent is None:
        if state.tokens:
            raise DomainError("cannot advance a detached prefix state")
        return ctc_prefix_init(state.lattice, upto_frame)
    parent = advance_state(state.parent, upto_frame)
    _, successor = ctc_prefix_extend_batch([parent], [state.tokens[-1]], upto_frame)
    return successor(0, 0)


def _prefix_logp_upto(state: CtcPrefixState, upto: int) -> float:
    if state.parent is None:
        return 0.0
    psi, _ = ctc_prefix_extend_batch([state.parent], [state.tokens[-1]], upto)
    return float(psi[0, 0])


def ctc_prefix_state_for(lattice: PosteriorLattice, tokens: Sequence[int],
                         upto_frame: int | None = None) -> CtcPrefixState:
    """Build the prefix state for ``tokens`` by extending from the empty prefix."""
    state = ctc_prefix_init(lattice, upto_frame)
    for tok in tokens:
        _, succ = ctc_prefix_extend(state, [tok], state.frames)
        state = succ[0]
    return state


def ctc_greedy(lattice: PosteriorLattice) -> tuple[int, ...]:
    blank = lattice.vocab.blank_id
    best = np.argmax(lattice.frames, axis=1) if lattice.num_frames else []
    out = []
    prev = None
    for tok in best:
        tok = int(tok)
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return tuple(out)


@dataclass(frozen=True)
class EndDetectConfig:
    threshold_logp_gap: float = -10.0
    window_lengths: int = 3

    def __post_init__(self):
        if self.window_lengths < 1:
            raise DomainError("window_lengths must be >= 1")


def end_detect(scored_lengths: Mapping[int, float], config: EndDetectConfig = EndDetectConfig()) -> bool:
    """True when each of the ``window`` most recent lengths scores far below the global best.

    ``scored_lengths`` maps a hypothesis length (or step index) to the best score observed
    there. The recent lengths are the ``window`` consecutive values ending at the largest key;
    any missing one means the window has not been observed and the result is False.
    """
    if not scored_lengths:
        raise DomainError("scored_lengths must not be empty")
    best = max(scored_lengths.values())
    last = max(scored_lengths)
    for length in range(last, last - config.window_lengths, -1):
        score = scored_lengths.get(length)
        if score is None or score - best >= config.threshold_logp_gap:
            return False
    return True
