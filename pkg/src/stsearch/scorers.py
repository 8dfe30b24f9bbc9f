"""Deterministic score sources standing in for attention decoders and transducer joints."""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import ROW_TOLERANCE, DomainError, ParseError, Vocabulary, clamp, log_normalizer, NEG_INF

DEFAULT_U_MAX = 32


def _as_row(values, size: int, where: str) -> np.ndarray:
    if not isinstance(values, (list, tuple, np.ndarray)):
        raise ParseError(f"{where}: distribution must be an array of numbers")
    row = clamp(np.asarray(values, dtype=np.float64))
    if row.shape != (size,):
        raise ParseError(f"{where}: expected {size} values, got {row.shape[0] if row.ndim else 0}")
    if not np.isfinite(row).all():
        raise ParseError(f"{where}: non-finite value in distribution")
    norm = log_normalizer(row)
    if abs(norm) > ROW_TOLERANCE:
        raise ParseError(f"{where}: distribution not normalized (log-sum-exp = {norm:.6g})")
    row.flags.writeable = False
    return row


class PrefixScorer(ABC):
    """Next-token log-distribution over the vocabulary given a prefix and visible source frames."""

    vocab: Vocabulary

    @abstractmethod
    def score(self, prefix: tuple[int, ...], frames_visible: int) -> np.ndarray:
        ...


class JointScorer(ABC):
    """Log-distribution over ``V`` tokens plus blank (last column) at a transducer grid point."""

    vocab_size: int
    num_frames: int

    @abstractmethod
    def score(self, t: int, u: int, prefix: tuple[int, ...]) -> np.ndarray:
        ...

    @property
    def blank_index(self) -> int:
        return self.vocab_size


def score_prefix(scorer: PrefixScorer, prefix: Sequence[int], frames_visible: int) -> np.ndarray:
    prefix = tuple(int(p) for p in prefix)
    if scorer.vocab.blank_id in prefix:
        raise DomainError("prefix must not contain the blank id")
    return scorer.score(prefix, frames_visible)


def score_joint(scorer: JointScorer, t: int, u: int, prefix: Sequence[int]) -> np.ndarray:
    if not 0 <= t < scorer.num_frames:
        raise DomainError(f"frame {t} outside 0..{scorer.num_frames - 1}")
    if u < 0:
        raise DomainError("u must be non-negative")
    return scorer.score(t, u, tuple(prefix))


class TrieScorer(PrefixScorer):
    """Exact-match lookup on full prefixes with a single backoff distribution."""

    def __init__(self, vocab: Vocabulary, backoff, entries: Mapping[tuple[int, ...], object] | None = None):
        self.vocab = vocab
        V = len(vocab)
        self.backoff = _as_row(backoff, V, "backoff")
        self.entries: dict[tuple[int, ...], np.ndarray] = {}
        for prefix, dist in (entries or {}).items():
            key = tuple(int(p) for p in prefix)
            self.entries[key] = _as_row(dist, V, f"entry for prefix {list(key)}")

    def score(self, prefix, frames_visible):
        return self.entries.get(tuple(prefix), self.backoff)

    def to_json(self) -> dict:
        return {
            "vocab_ref": self.vocab.to_json(),
            "backoff": self.backoff.tolist(),
            "entries": [{"prefix": list(k), "dist": v.tolist()} for k, v in self.entries.items()],
        }

    @classmethod
    def from_json(cls, obj) -> "TrieScorer":
        if not isinstance(obj, dict):
            raise ParseError("trie scorer file must hold a JSON object")
        for key in ("vocab_ref", "backoff"):
            if key not in obj:
                raise ParseError(f"missing field '{key}'")
        vocab = Vocabulary.from_json(obj["vocab_ref"])
        entries = {}
        for i, entry in enumerate(obj.get("entries", [])):
            if not isinstance(entry, dict) or "prefix" not in entry or "dist" not in entry:
                raise ParseError(f"entries[{i}] must have 'prefix' and 'dist'")
            entries[tuple(entry["prefix"])] = entry["dist"]
        return cls(vocab, obj["backoff"], entries)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")


class TableJointScorer(JointScorer):
    """Rows keyed by ``(t, u)``; beyond ``u_max`` (or for missing cells) the default row applies."""

    def __init__(self, rows: Mapping[tuple[int, int], object], default, u_max: int = DEFAULT_U_MAX,
                 num_frames: int | None = None, vocab: Sequence[str] | None = None):
        default = np.asarray(default, dtype=np.float64)
        self.vocab_size = default.shape[0] - 1
        if self.vocab_size < 1:
            raise ParseError("default row needs at least one token plus blank")
        size = self.vocab_size + 1
        self.default = _as_row(default, size, "default")
        self.u_max = int(u_max)
        self.rows: dict[tuple[int, int], np.ndarray] = {}
        for (t, u), dist in rows.items():
            if t < 0 or u < 0:
                raise ParseError(f"row (t={t}, u={u}) has a negative index")
            self.rows[(int(t), int(u))] = _as_row(dist, size, f"row (t={t}, u={u})")
        inferred = 1 + max((t for t, _ in self.rows), default=0)
        self.num_frames = inferred if num_frames is None else int(num_frames)
        if self.num_frames < inferred:
            raise ParseError(f"num_frames={self.num_frames} but rows reach t={inferred - 1}")
        self.vocab = tuple(vocab) if vocab is not None else None

    def score(self, t, u, prefix):
        if not 0 <= t < self.num_frames:
            raise DomainError(f"frame {t} outside 0..{self.num_frames - 1}")
        if u > self.u_max:
            return self.default
        return self.rows.get((t, u), self.default)

    def token_strings(self, ids: Sequence[int]) -> list[str]:
        if self.vocab is None:
            return [str(i) for i in ids]
        return [self.vocab[i] for i in ids]

    def to_json(self) -> dict:
        obj = {
            "u_max": self.u_max,
            "num_frames": self.num_frames,
            "rows": [{"t": t, "u": u, "dist": d.tolist()} for (t, u), d in sorted(self.rows.items())],
            "default": self.default.tolist(),
        }
        if self.vocab is not None:
            obj["vocab"] = list(self.vocab)
        return obj

    @classmethod
    def from_json(cls, obj) -> "TableJointScorer":
        if not isinstance(obj, dict):
            raise ParseError("joint scorer file must hold a JSON object")
        if "default" not in obj:
            raise ParseError("missing field 'default'")
        rows = {}
        for i, row in enumerate(obj.get("rows", [])):
            if not isinstance(row, dict) or not {"t", "u", "dist"} <= row.keys():
                raise ParseError(f"rows[{i}] must have 't', 'u' and 'dist'")
            rows[(row["t"], row["u"])] = row["dist"]
        vocab = obj.get("vocab")
        if vocab is not None and len(vocab) != len(obj["default"]) - 1:
            raise ParseError("field 'vocab' must list one string per non-blank column")
        return cls(rows, obj["default"], obj.get("u_max", DEFAULT_U_MAX), obj.get("num_frames"), vocab)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc


def load_trie_scorer(path) -> TrieScorer:
    return TrieScorer.from_json(_read_json(path))


def load_joint_scorer(path) -> TableJointScorer:
    return TableJointScorer.from_json(_read_json(path))


def blank_dominant_row(vocab_size: int, blank_logp: float = -1e-3) -> np.ndarray:
    """Row putting nearly all mass on blank; used as the beyond-cap default."""
    rest = np.log1p(-np.exp(blank_logp)) - np.log(vocab_size)
    return np.append(np.full(vocab_size, rest), blank_logp)


class EchoScorer(PrefixScorer):
    """Deterministically reproduces ``target`` and then eos; everything else is near impossible."""

    def __init__(self, vocab: Vocabulary, target: Sequence[int], confidence: float = 0.99):
        self.vocab = vocab
        self.target = tuple(target)
        self.confidence = confidence

    def score(self, prefix, frames_visible):
        V = len(self.vocab)
        pos = len(prefix)
        on_track = tuple(prefix) == self.target[:pos]
        want = self.target[pos] if on_track and pos < len(self.target) else self.vocab.eos_id
        allowed = [i for i in range(V) if i not in (self.vocab.blank_id, self.vocab.sos_id)]
        row = np.full(V, NEG_INF)
        row[allowed] = np.log((1 - self.confidence) / (len(allowed) - 1))
        row[want] = np.log(self.confidence)
        return row
