"""Smoothed sentence-level BLEU (the static reward) and corpus BLEU (evaluation).

Sentence BLEU smooths orders n >= 2 by adding one to both the match count and
the candidate n-gram count; unigram precision is left unsmoothed so a
candidate with no overlapping token scores exactly 0. EOS/PAD/BOS are removed
before counting.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from .corpus import strip_special

MAX_ORDER = 4


@dataclass(frozen=True)
class NGramCounts:
    matches: tuple[int, ...]
    candidates: tuple[int, ...]
    cand_len: int
    ref_len: int

    def __add__(self, other: "NGramCounts") -> "NGramCounts":
        return NGramCounts(
            tuple(a + b for a, b in zip(self.matches, other.matches)),
            tuple(a + b for a, b in zip(self.candidates, other.candidates)),
            self.cand_len + other.cand_len,
            self.ref_len + other.ref_len,
        )


@dataclass(frozen=True)
class BleuScore:
    value: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    counts: NGramCounts


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@lru_cache(maxsize=65536)
def _reference_ngrams(reference: tuple, max_order: int) -> tuple[Counter, ...]:
    return tuple(_ngrams(reference, n) for n in range(1, max_order + 1))


def ngram_counts(candidate: Sequence[int], reference: Sequence[int], max_order: int = MAX_ORDER) -> NGramCounts:
    candidate, reference = tuple(candidate), tuple(reference)
    ref_grams = _reference_ngrams(reference, max_order)
    matches, totals = [], []
    for n in range(1, max_order + 1):
        r = ref_grams[n - 1]
        matches.append(sum(min(cnt, r.get(g, 0)) for g, cnt in _ngrams(candidate, n).items()))
        totals.append(max(len(candidate) - n + 1, 0))
    return NGramCounts(tuple(matches), tuple(totals), len(candidate), len(reference))


def brevity_penalty(cand_len: int, ref_len: int) -> float:
    if ref_len <= 0:
        raise ValueError("brevity_penalty: reference length must be positive")
    if cand_len < 0:
        raise ValueError("brevity_penalty: negative candidate length")
    if cand_len == 0:
        return 0.0
    if cand_len >= ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / cand_len)


def _precisions(counts: NGramCounts, smoothing: str) -> list[float]:
    out = []
    for n, (m, c) in enumerate(zip(counts.matches, counts.candidates), start=1):
        if smoothing == "add-one" and n >= 2:
            out.append((m + 1) / (c + 1))
        else:
            out.append(m / c if c > 0 else 0.0)
    return out


def _combine(counts: NGramCounts, smoothing: str) -> BleuScore:
    if counts.cand_len == 0:
        return BleuScore(0.0, (0.0,) * len(counts.matches), 0.0, counts)
    prec = _precisions(counts, smoothing)
    bp = brevity_penalty(counts.cand_len, counts.ref_len)
    if min(prec) <= 0.0:
        return BleuScore(0.0, tuple(prec), bp, counts)
    value = bp * math.exp(sum(math.log(p) for p in prec) / len(prec))
    return BleuScore(min(value, 1.0), tuple(prec), bp, counts)


def sentence_bleu(candidate: Sequence[int], reference: Sequence[int], smoothing: str = "add-one") -> BleuScore:
    """Smoothed BLEU of one candidate against one reference, in [0, 1]."""
    if smoothing not in ("add-one", "none"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    cand, ref = strip_special(candidate), strip_special(reference)
    if not ref:
        raise ValueError("sentence_bleu: empty reference")
    return _combine(ngram_counts(cand, ref), smoothing)


def corpus_bleu(candidates: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> BleuScore:
    """Standard corpus BLEU: pooled clipped counts, no smoothing, corpus-level brevity penalty."""
    if len(candidates) != len(references):
        raise ValueError(f"corpus_bleu: {len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("corpus_bleu: empty corpus")
    total = None
    for c, r in zip(candidates, references):
        ref = strip_special(r)
        if not ref:
            raise ValueError("corpus_bleu: empty reference")
        counts = ngram_counts(strip_special(c), ref)
        total = counts if total is None else total + counts
    return _combine(total, "none")
