"""Shared domain types, log-domain helpers and lattice serialization."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

#: Finite stand-in for log(0). Anything at or below ``IMPOSSIBLE`` is treated as zero mass.
NEG_INF = -1e10
IMPOSSIBLE = NEG_INF / 2

ROW_TOLERANCE = 1e-4
BINARY_MAGIC = b"BLATT\x00\x00\x01"


class DecodeError(Exception):
    """Base error. ``code`` is the tag printed by the CLI as ``error[CODE]``."""

    code = "DATA"


class ParseError(DecodeError):
    code = "PARSE"


class DimensionError(DecodeError):
    code = "DIM"


class VocabMismatchError(DecodeError):
    code = "VOCAB"


class DomainError(DecodeError, ValueError):
    code = "DOMAIN"


class StateError(DecodeError):
    code = "STATE"


class SearchSpaceError(DecodeError):
    """Raised by the exhaustive oracles when asked to enumerate too much."""

    code = "SPACE"


def is_impossible(logp):
    if np.ndim(logp):
        return np.asarray(logp) <= IMPOSSIBLE
    return bool(logp <= IMPOSSIBLE)


def clamp(x):
    """Snap anything at or below ``IMPOSSIBLE`` to the sentinel so it stays absorbing."""
    if isinstance(x, np.ndarray):
        return np.where(x <= IMPOSSIBLE, NEG_INF, x)
    return NEG_INF if x <= IMPOSSIBLE else x


def log_add(a: float, b: float) -> float:
    return clamp(float(np.logaddexp(a, b)))


def log_sum(values: Iterable[float]) -> float:
    arr = np.fromiter(values, dtype=np.float64)
    if arr.size == 0:
        return NEG_INF
    return clamp(float(np.logaddexp.reduce(arr)))


def log_normalizer(row) -> float:
    return float(np.logaddexp.reduce(np.asarray(row, dtype=np.float64)))


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    blank_id: int
    sos_id: int
    eos_id: int
    unk_id: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        problems = self.problems()
        if problems:
            raise DomainError("invalid vocabulary: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        specials = {"blank_id": self.blank_id, "sos_id": self.sos_id,
                    "eos_id": self.eos_id, "unk_id": self.unk_id}
        for name, idx in specials.items():
            if not isinstance(idx, (int, np.integer)) or not 0 <= idx < len(self.tokens):
                out.append(f"{name}={idx} out of range")
        if len(set(specials.values())) != len(specials):
            out.append("special ids are not distinct")
        if len(set(self.tokens)) != len(self.tokens):
            out.append("token strings are not unique")
        return out

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def emittable(self) -> np.ndarray:
        """Ids a search may output: everything but blank, sos and eos."""
        skip = {self.blank_id, self.sos_id, self.eos_id}
        return np.array([i for i in range(len(self.tokens)) if i not in skip], dtype=np.int64)

    def encode(self, words: Sequence[str]) -> tuple[int, ...]:
        index = {tok: i for i, tok in enumerate(self.tokens)}
        return tuple(index.get(w, self.unk_id) for w in words)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_json(self) -> dict:
        return {"vocab": list(self.tokens), "blank_id": self.blank_id, "sos_id": self.sos_id,
                "eos_id": self.eos_id, "unk_id": self.unk_id}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        for key in ("vocab", "blank_id", "sos_id", "eos_id", "unk_id"):
            if key not in obj:
                raise ParseError(f"missing field '{key}'")
        if not isinstance(obj["vocab"], list) or not all(isinstance(t, str) for t in obj["vocab"]):
            raise ParseError("field 'vocab' must be an array of strings")
        for key in ("blank_id", "sos_id", "eos_id", "unk_id"):
            if not isinstance(obj[key], int) or isinstance(obj[key], bool):
                raise ParseError(f"field '{key}' must be an integer")
        try:
            return cls(tuple(obj["vocab"]), obj["blank_id"], obj["sos_id"], obj["eos_id"], obj["unk_id"])
        except DomainError as exc:
            raise ParseError(str(exc)) from exc


@dataclass(frozen=True, eq=False)
class PosteriorLattice:
    """T x V frame log-posteriors. Rows may be split into streaming blocks.

    ``-inf`` entries are replaced by :data:`NEG_INF`; NaN and ``+inf`` are kept so
    :func:`validate_lattice` can report them.
    """

    frames: np.ndarray
    vocab: Vocabulary
    block_boundaries: tuple[int, ...] | None = None

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64, copy=True)
        if frames.ndim == 1 and frames.size == 0:
            frames = frames.reshape(0, len(self.vocab))
        if frames.ndim != 2:
            raise DimensionError(f"frames must be a T x V matrix, got shape {frames.shape}")
        if frames.shape[1] != len(self.vocab):
            raise DimensionError(
                f"frame rows have {frames.shape[1]} columns but the vocabulary has {len(self.vocab)} tokens")
        frames[np.isneginf(frames)] = NEG_INF
        frames[(frames < NEG_INF) & np.isfinite(frames)] = NEG_INF
        frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)
        if self.block_boundaries is not None:
            object.__setattr__(self, "block_boundaries", tuple(int(b) for b in self.block_boundaries))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.frames.shape[1]

    def blocks(self, block_size: int | None = None) -> list[np.ndarray]:
        """Split the rows into blocks, by ``block_size`` or by the stored boundaries."""
        if block_size is not None:
            return [self.frames[i:i + block_size] for i in range(0, self.num_frames, block_size)]
        bounds = self.block_boundaries or (self.num_frames,)
        starts = (0,) + bounds[:-1]
        return [self.frames[s:e] for s, e in zip(starts, bounds)]

    def head(self, n: int) -> "PosteriorLattice":
        return PosteriorLattice(self.frames[:n], self.vocab)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PosteriorLattice):
            return NotImplemented
        return (self.vocab == other.vocab and self.block_boundaries == other.block_boundaries
                and self.frames.shape == other.frames.shape
                and bool(np.array_equal(self.frames, other.frames, equal_nan=True)))

    __hash__ = None


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    att_logp: float = 0.0
    ctc_state: tuple[float, float] = (NEG_INF, 0.0)  # (log p_nonblank, log p_blank)
    combined_logp: float = 0.0
    delays: tuple[int, ...] = ()
    finished: bool = False

    def __post_init__(self):
        if len(self.delays) != len(self.tokens):
            raise DomainError("delays must have one entry per token")
        if any(b < a for a, b in zip(self.delays, self.delays[1:])):
            raise DomainError("delays must be non-decreasing")


@dataclass(frozen=True)
class NBestEntry:
    tokens: tuple[int, ...]
    score: float
    delays: tuple[int, ...] = ()
    finished: bool = True


def ranking_key(tokens: Sequence[int], score: float):
    """Descending score; ties go to the shorter sequence, then lexicographic ids."""
    return (-score, len(tokens), tuple(tokens))


@dataclass(frozen=True)
class NBestList:
    entries: tuple[NBestEntry, ...]
    source_len_frames: int

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for prev, cur in zip(self.entries, self.entries[1:]):
            if cur.score > prev.score:
                raise DomainError("n-best entries must be sorted by non-increasing score")
        for e in self.entries:
            if e.tokens in seen:
                raise DomainError(f"duplicate token sequence {e.tokens} in n-best list")
            seen.add(e.tokens)

    @classmethod
    def build(cls, entries: Iterable[NBestEntry], source_len_frames: int, nbest: int | None = None,
              key=None) -> "NBestList":
        """Sort with the standard tie-break, drop duplicate sequences, keep ``nbest``."""
        key = key or (lambda e: ranking_key(e.tokens, e.score))
        best: dict[tuple[int, ...], NBestEntry] = {}
        for e in entries:
            cur = best.get(e.tokens)
            if cur is None or key(e) < key(cur):
                best[e.tokens] = e
        ordered = sorted(best.values(), key=key)
        if nbest is not None:
            ordered = ordered[:nbest]
        return cls(tuple(ordered), source_len_frames)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i) -> NBestEntry:
        return self.entries[i]

    @property
    def best(self) -> NBestEntry:
        return self.entries[0]


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_lattice(lattice: PosteriorLattice, tolerance: float = ROW_TOLERANCE) -> ValidationReport:
    report = ValidationReport()
    frames = lattice.frames
    bad = ~np.isfinite(frames)
    if bad.any():
        for t, v in zip(*np.nonzero(bad)):
            report.violations.append(f"non-finite value {frames[t, v]} at frame {t}, token {v}")
    for t, row in enumerate(frames):
        if not np.isfinite(row).all():
            continue
        norm = log_normalizer(row)
        if abs(norm) > tolerance:
            report.violations.append(f"frame {t} not normalized: log-sum-exp = {norm:.6g}")
    bounds = lattice.block_boundaries
    if bounds is not None:
        if any(b <= a for a, b in zip(bounds, bounds[1:])):
            report.violations.append(f"block_boundaries not strictly ascending: {list(bounds)}")
        if not bounds or bounds[-1] != lattice.num_frames:
            report.violations.append(
                f"last block boundary must equal T={lattice.num_frames}, got {list(bounds)}")
        if bounds and bounds[0] <= 0:
            report.violations.append("block boundaries must be positive")
    report.violations.extend(lattice.vocab.problems())
    return report


def _header(lattice: PosteriorLattice) -> dict:
    obj = lattice.vocab.to_json()
    if lattice.block_boundaries is not None:
        obj["block_boundaries"] = list(lattice.block_boundaries)
    return obj


def _from_header(obj: dict, frames) -> PosteriorLattice:
    vocab = Vocabulary.from_json(obj)
    bounds = obj.get("block_boundaries")
    if bounds is not None and (not isinstance(bounds, list) or not all(isinstance(b, int) for b in bounds)):
        raise ParseError("field 'block_boundaries' must be an array of integers")
    lattice = PosteriorLattice(frames, vocab, tuple(bounds) if bounds is not None else None)
    report = validate_lattice(lattice)
    if not report.ok:
        logger.warning("lattice loaded with %d violation(s): %s", len(report.violations), report.violations[0])
    return lattice


def lattice_to_json(lattice: PosteriorLattice) -> dict:
    obj = _header(lattice)
    obj["frames"] = lattice.frames.tolist()
    return obj


def lattice_from_json(obj) -> PosteriorLattice:
    if not isinstance(obj, dict):
        raise ParseError("lattice file must hold a JSON object")
    if "frames" not in obj:
        raise ParseError("missing field 'frames'")
    rows = obj["frames"]
    if not isinstance(rows, list):
        raise ParseError("field 'frames' must be an array of arrays")
    vocab_len = len(obj.get("vocab", []))
    for t, row in enumerate(rows):
        if not isinstance(row, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                for v in row):
            raise ParseError(f"field 'frames' row {t} must be an array of numbers")
        if len(row) != vocab_len:
            raise DimensionError(f"frames row {t} has {len(row)} values, expected V={vocab_len}")
    frames = np.array(rows, dtype=np.float64).reshape(len(rows), vocab_len)
    return _from_header(obj, frames)


def save_lattice(lattice: PosteriorLattice, path, binary: bool | None = None) -> None:
    """Write JSON text, or the binary form when ``binary`` (default: ``.blat`` suffix)."""
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".blat"
    if not binary:
        path.write_text(json.dumps(lattice_to_json(lattice)), encoding="utf-8")
        return
    header = json.dumps(_header(lattice)).encode("utf-8")
    t, v = lattice.frames.shape
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<II", t, v))
        fh.write(lattice.frames.astype("<f4").tobytes())
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)


def load_lattice(path) -> PosteriorLattice:
    data = Path(path).read_bytes()
    if data.startswith(BINARY_MAGIC):
        return _load_binary(data)
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"lattice is neither binary nor valid JSON: {exc}") from exc
    return lattice_from_json(obj)


def _load_binary(data: bytes) -> PosteriorLattice:
    off = len(BINARY_MAGIC)
    if len(data) < off + 8:
        raise ParseError("truncated binary lattice: missing T/V")
    t, v = struct.unpack_from("<II", data, off)
    off += 8
    n = t * v * 4
    if len(data) < off + n + 4:
        raise ParseError("truncated binary lattice: frames")
    frames = np.frombuffer(data, dtype="<f4", count=t * v, offset=off).astype(np.float64).reshape(t, v)
    off += n
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"binary lattice header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ParseError("binary lattice header must be a JSON object")
    if len(header.get("vocab", [])) != v:
        raise DimensionError(f"header vocabulary has {len(header.get('vocab', []))} tokens, frames have V={v}")
    return _from_header(header, frames)


def uniform_row(size: int) -> np.ndarray:
    return np.full(size, -math.log(size))
