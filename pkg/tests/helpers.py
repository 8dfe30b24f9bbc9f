"""Shared builders for tests."""

import math

import numpy as np

from stsearch.core import NEG_INF, PosteriorLattice


def lattice_from_probs(vocab, rows):
    """Rows given as {token_id: probability}; unlisted columns get zero mass."""
    frames = np.full((len(rows), len(vocab)), NEG_INF)
    for t, row in enumerate(rows):
        for tok, p in row.items():
            frames[t, tok] = math.log(p) if p > 0 else NEG_INF
    return PosteriorLattice(frames, vocab)


def active_lattice(rng, vocab, T, active):
    """Random lattice whose mass sits on ``active`` ids only (an effective vocabulary of that size)."""
    probs = rng.dirichlet(np.ones(len(active)), size=T)
    return lattice_from_probs(vocab, [dict(zip(active, p)) for p in probs])
