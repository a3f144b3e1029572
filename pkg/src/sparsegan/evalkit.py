"""BLEU-N and Self-BLEU.

Scores are sentence-level BLEU averaged over candidates: clipped n-gram
precision against the whole reference set (max count over references),
geometric mean over the orders 1..min(n_max, len), brevity penalty against the closest
reference length (shorter wins ties). A zero precision is replaced by 1e-9.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence, Union

from .corpus import ConfigError

logger = logging.getLogger(__name__)

SMOOTH_EPS = 1e-9

Sentence = Union[str, Sequence[str]]


def _tokens(s: Sentence) -> tuple[str, ...]:
    return tuple(s.split()) if isinstance(s, str) else tuple(s)


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(zip(*(tokens[i:] for i in range(n))))


def ngram_oracle(sentence: Sentence, n: int) -> dict[tuple[str, ...], int]:
    """Brute-force sliding-window n-gram counts (kept independent of ``ngram_counts``)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    toks = _tokens(sentence)
    profile: dict[tuple[str, ...], int] = {}
    start = 0
    while start + n <= len(toks):
        gram = tuple(toks[start:start + n])
        profile[gram] = profile.get(gram, 0) + 1
        start += 1
    return profile


@dataclass
class BleuDetail:
    score: float
    precisions: list[float]
    brevity_penalty: float
    ref_length: int


def _closest_length(c: int, lengths) -> int:
    return min(lengths, key=lambda r: (abs(r - c), r))


def _combine(c_len: int, matches: list[int], totals: list[int], ref_len: int) -> BleuDetail:
    # orders longer than the candidate have no n-grams at all and are left out
    precisions = [m / t if m else SMOOTH_EPS for m, t in zip(matches, totals) if t]
    log_mean = sum(math.log(p) for p in precisions) / len(precisions)
    bp = 1.0 if c_len >= ref_len else math.exp(1.0 - ref_len / c_len)
    return BleuDetail(bp * math.exp(log_mean), precisions, bp, ref_len)


class ReferenceSet:
    """Max n-gram counts and lengths of a reference corpus."""

    def __init__(self, references: Sequence[Sentence], n_max: int):
        refs = [_tokens(r) for r in references]
        if not refs:
            raise ConfigError("need at least one reference")
        self.n_max = n_max
        self.lengths = sorted(set(len(r) for r in refs))
        self.max_counts: list[dict] = []
        for n in range(1, n_max + 1):
            best: dict = {}
            for r in refs:
                for g, c in ngram_counts(r, n).items():
                    if c > best.get(g, 0):
                        best[g] = c
            self.max_counts.append(best)

    def score(self, candidate: Sentence) -> BleuDetail:
        cand = _tokens(candidate)
        if not cand:
            raise ValueError("empty candidate")
        matches, totals = [], []
        for n in range(1, self.n_max + 1):
            counts = ngram_counts(cand, n)
            best = self.max_counts[n - 1]
            matches.append(sum(min(c, best.get(g, 0)) for g, c in counts.items()))
            totals.append(max(len(cand) - n + 1, 0))
        return _combine(len(cand), matches, totals, _closest_length(len(cand), self.lengths))


def sentence_bleu(candidate: Sentence, references: Sequence[Sentence], n_max: int = 4) -> BleuDetail:
    return ReferenceSet(references, n_max).score(candidate)


def bleu_scores(candidates: Sequence[Sentence], references: Sequence[Sentence],
                n_max: int = 4) -> tuple[list[float], int]:
    """Per-candidate scores and the number of empty candidates skipped."""
    if not candidates or not references:
        raise ConfigError("candidates and references must be non-empty")
    refset = ReferenceSet(references, n_max)
    scores, skipped = [], 0
    for c in candidates:
        if not _tokens(c):
            skipped += 1
            continue
        scores.append(refset.score(c).score)
    if skipped:
        logger.warning("skipped %d empty candidates", skipped)
    return scores, skipped


def bleu_n(candidates: Sequence[Sentence], references: Sequence[Sentence], n_max: int = 4) -> float:
    scores, _ = bleu_scores(candidates, references, n_max)
    return math.fsum(scores) / len(scores) if scores else 0.0


class _LeaveOneOut:
    """Per n-gram top-2 counts, so a sentence can be scored against all the others."""

    def __init__(self, sents: list[tuple[str, ...]], n_max: int):
        self.n_max = n_max
        self.len_counts = Counter(len(s) for s in sents)
        self.stats: list[dict] = []
        for n in range(1, n_max + 1):
            top: dict = {}
            for s in sents:
                for g, c in ngram_counts(s, n).items():
                    first, mult, second = top.get(g, (0, 0, 0))
                    if c > first:
                        top[g] = (c, 1, first)
                    elif c == first:
                        top[g] = (first, mult + 1, second)
                    elif c > second:
                        top[g] = (first, mult, c)
            self.stats.append(top)

    def score(self, cand: tuple[str, ...]) -> BleuDetail:
        matches, totals = [], []
        for n in range(1, self.n_max + 1):
            top = self.stats[n - 1]
            m = 0
            for g, c in ngram_counts(cand, n).items():
                first, mult, second = top[g]
                other = second if (c == first and mult == 1) else first
                m += min(c, other)
            matches.append(m)
            totals.append(max(len(cand) - n + 1, 0))
        lens = self.len_counts.copy()
        lens[len(cand)] -= 1
        ref_len = _closest_length(len(cand), [k for k, v in lens.items() if v > 0])
        return _combine(len(cand), matches, totals, ref_len)


def self_bleu(candidates: Sequence[Sentence], n_max: int = 4) -> float:
    """Mean BLEU of each candidate against all the other candidates."""
    sents = [_tokens(c) for c in candidates]
    sents = [s for s in sents if s]
    if len(sents) < 2:
        raise ConfigError("self-BLEU needs at least two non-empty candidates")
    loo = _LeaveOneOut(sents, n_max)
    return math.fsum(loo.score(s).score for s in sents) / len(sents)


def evaluate(candidates: Sequence[Sentence], references: Sequence[Sentence],
             orders: Sequence[int] = (2, 3, 4, 5)) -> dict:
    """The metrics JSON written by the ``eval`` command."""
    return {
        "bleu": {str(n): bleu_n(candidates, references, n) for n in orders},
        "self_bleu": {str(n): self_bleu(candidates, n) for n in orders} if len(candidates) > 1 else {},
        "n_candidates": len(candidates),
        "n_references": len(references),
    }
