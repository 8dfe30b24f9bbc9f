"""Corpus BLEU and Average Lagging."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .core import DomainError, ParseError

MAX_ORDER = 4


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, ...]  # percentages, as most scorers print them
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: tuple[int, ...]
    totals: tuple[int, ...]

    def format(self) -> str:
        p = "/".join(f"{x:.1f}" for x in self.precisions)
        return (f"BLEU = {self.bleu:.2f} {p} (BP = {self.brevity_penalty:.3f} "
                f"hyp_len = {self.hyp_len} ref_len = {self.ref_len})")


def ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def tokenize(text: str, tokenizer: str = "whitespace") -> list[str]:
    if tokenizer != "whitespace":
        raise DomainError(f"unsupported tokenizer {tokenizer!r}")
    return text.split()


def sentence_stats(hyp: Sequence[str], ref: Sequence[str], max_order: int = MAX_ORDER):
    """Clipped n-gram matches and hypothesis n-gram totals per order."""
    matches, totals = [], []
    for n in range(1, max_order + 1):
        h, r = ngrams(hyp, n), ngrams(ref, n)
        matches.append(sum(min(c, r[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return matches, totals


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    return min(1.0, math.exp(1.0 - ref_len / hyp_len))


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str],
                tokenizer: str = "whitespace") -> BleuReport:
    """Case-sensitive unsmoothed corpus BLEU on pre-detokenized text."""
    if len(hypotheses) == 0:
        raise DomainError("corpus_bleu needs at least one hypothesis")
    if len(hypotheses) != len(references):
        raise DomainError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    c = r = 0
    for hyp, ref in zip(hypotheses, references):
        h, rf = tokenize(hyp, tokenizer), tokenize(ref, tokenizer)
        c += len(h)
        r += len(rf)
        m, t = sentence_stats(h, rf)
        for n in range(MAX_ORDER):
            matches[n] += m[n]
            totals[n] += t[n]
    precisions = tuple(100.0 * m / t if t else 0.0 for m, t in zip(matches, totals))
    bp = brevity_penalty(c, r)
    if min(matches) == 0:
        bleu = 0.0
    else:
        log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / MAX_ORDER
        bleu = 100.0 * bp * math.exp(log_p)
    return BleuReport(bleu, precisions, bp, c, r, tuple(matches), tuple(totals))


def sentence_bleu(hyp: Sequence[str], ref: Sequence[str], max_order: int = MAX_ORDER) -> float:
    """Add-one smoothed sentence BLEU in [0, 1]; 0 for an empty hypothesis."""
    if len(hyp) == 0:
        return 0.0
    m, t = sentence_stats(hyp, ref, max_order)
    log_p = sum(math.log((mi + 1) / (ti + 1)) for mi, ti in zip(m, t)) / max_order
    return brevity_penalty(len(hyp), len(ref)) * math.exp(log_p)


@dataclass(frozen=True)
class LatencyRecord:
    delays: tuple[int, ...]  # source frames read before each target token was written
    source_len: int
    target_len: int

    def __post_init__(self):
        object.__setattr__(self, "delays", tuple(int(d) for d in self.delays))
        if any(b < a for a, b in zip(self.delays, self.delays[1:])):
            raise DomainError("delays must be non-decreasing")
        if any(d > self.source_len for d in self.delays):
            raise DomainError("a delay exceeds the source length")


def average_lagging(record: LatencyRecord) -> float:
    X, Y = record.source_len, record.target_len
    if X < 1 or Y < 1:
        raise DomainError("average lagging needs |X| >= 1 and |Y| >= 1")
    d = record.delays
    if len(d) > Y:
        raise DomainError(f"{len(d)} delays for a target of {Y} tokens")
    if not d:
        raise DomainError("no delays recorded")
    tau = next((i + 1 for i, di in enumerate(d) if di >= X), len(d))
    rate = X / Y
    return sum(d[i] - i * rate for i in range(tau)) / tau


def corpus_al(records: Sequence[LatencyRecord]) -> float:
    if not records:
        raise DomainError("corpus_al needs at least one record")
    return math.fsum(average_lagging(r) for r in records) / len(records)


def record_from_events(events: Iterable[dict], source_len: int | None = None) -> LatencyRecord:
    """Latency record from READ/WRITE event objects."""
    frames = 0
    delays = []
    for i, e in enumerate(events):
        kind = e.get("type") if isinstance(e, dict) else None
        if kind == "READ":
            if not isinstance(e.get("frames"), int) or e["frames"] < 0:
                raise ParseError(f"event {i}: READ needs a non-negative integer 'frames'")
            frames += e["frames"]
        elif kind == "WRITE":
            fc = e.get("frames_consumed")
            if not isinstance(fc, int) or fc < 0:
                raise ParseError(f"event {i}: WRITE needs an integer 'frames_consumed'")
            delays.append(fc)
        else:
            raise ParseError(f"event {i}: field 'type' must be READ or WRITE")
    X = frames if source_len is None else source_len
    return LatencyRecord(tuple(delays), X, len(delays))


def read_event_log(path, source_len: int | None = None) -> LatencyRecord:
    events = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            events.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    return record_from_events(events, source_len)
