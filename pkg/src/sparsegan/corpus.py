"""Vocabulary, corpus and embedding ingestion, batching, and a toy grammar."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


class ConfigError(ValueError):
    """Invalid or empty input configuration."""


class EmbeddingParseError(ValueError):
    pass


class Vocab:
    def __init__(self, words: Sequence[str]):
        self.itos: list[str] = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.stoi.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def to_json(self) -> str:
        return json.dumps(self.itos[len(SPECIALS):])

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(json.loads(text))


def tokenize(line: str) -> list[str]:
    return line.lower().split()


def detokenize(words: Sequence[str]) -> str:
    return " ".join(words)


def build_vocab(sentences: Sequence[str], min_count: int = 1) -> Vocab:
    """Specials first, then words by descending frequency (ties alphabetical)."""
    if not sentences:
        raise ConfigError("cannot build a vocabulary from no sentences")
    counts = Counter(w for s in sentences for w in tokenize(s))
    kept = sorted((w for w, c in counts.items() if c >= min_count and w not in SPECIALS),
                  key=lambda w: (-counts[w], w))
    return Vocab(kept)


@dataclass
class Corpus:
    """Sentences as id lists wrapped in BOS ... EOS."""

    sentences: list[list[int]]
    vocab: Vocab
    n_truncated: int = 0

    def __post_init__(self):
        if not self.sentences:
            raise ConfigError("corpus is empty")
        n = len(self.vocab)
        for s in self.sentences:
            if len(s) < 3:
                raise ConfigError("corpus contains an empty sentence")
            if max(s) >= n:
                raise ConfigError("sentence id outside the vocabulary")

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def max_length(self) -> int:
        return max(len(s) for s in self.sentences)

    def words(self, i: int) -> list[str]:
        return self.vocab.decode(self.sentences[i])

    def texts(self) -> list[list[str]]:
        return [self.words(i) for i in range(len(self))]


def sentences_to_corpus(lines: Sequence[str], vocab: Vocab | None = None,
                        max_len: int = 40, min_count: int = 1) -> Corpus:
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ConfigError("no sentences")
    if vocab is None:
        vocab = build_vocab(lines, min_count)
    out = []
    truncated = 0
    for ln in lines:
        ids = [BOS] + vocab.encode(tokenize(ln)) + [EOS]
        if len(ids) > max_len:
            ids = ids[:max_len - 1] + [EOS]
            truncated += 1
        out.append(ids)
    if truncated:
        logger.warning("%d sentences truncated to %d tokens", truncated, max_len)
    return Corpus(out, vocab, truncated)


def load_corpus(path, vocab: Vocab | None = None, max_len: int = 40, min_count: int = 1) -> Corpus:
    """One whitespace-tokenized sentence per line, UTF-8."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not any(ln.strip() for ln in lines):
        raise ConfigError(f"corpus file is empty: {path}")
    return sentences_to_corpus(lines, vocab, max_len, min_count)


@dataclass
class EmbeddingInit:
    matrix: np.ndarray
    oov: list[str] = field(default_factory=list)


def load_embeddings(path, vocab: Vocab, d: int, seed: int = 0, oov_std: float = 0.1) -> EmbeddingInit:
    """Read GloVe-style text (``word f1 ... fd`` per line) into a vocab-aligned matrix.

    Rows missing from the file are drawn from N(0, oov_std^2); the padding row is zero.
    """
    rng = np.random.default_rng(seed)
    E = rng.normal(0.0, oov_std, size=(len(vocab), d))
    found = np.zeros(len(vocab), dtype=bool)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if not parts or not parts[0]:
                continue
            word, values = parts[0], parts[1:]
            if len(values) != d:
                raise ConfigError(f"line {lineno}: expected {d} values, found {len(values)}")
            try:
                vec = np.array([float(v) for v in values])
            except ValueError as exc:
                raise EmbeddingParseError(f"line {lineno}: {exc}") from None
            i = vocab.stoi.get(word)
            if i is not None:
                E[i] = vec
                found[i] = True
    E[PAD] = 0.0
    oov = [w for i, w in enumerate(vocab.itos) if not found[i] and i >= len(SPECIALS)]
    return EmbeddingInit(E, oov)


def random_embeddings(vocab_size: int, d: int, rng: np.random.Generator, std: float = 0.1) -> np.ndarray:
    E = rng.normal(0.0, std, size=(vocab_size, d))
    E[PAD] = 0.0
    return E


# toy grammar ---------------------------------------------------------------

GRAMMAR = {
    "categories": {
        "DET": ["the", "a", "every", "some"],
        "ADJ": ["big", "small", "red", "old", "happy", "quiet"],
        "NOUN": ["dog", "cat", "man", "woman", "bird", "child", "car", "house"],
        "VERB": ["sees", "likes", "chases", "finds", "watches", "follows"],
        "ADV": ["quickly", "often"],
        "PREP": ["near", "behind", "with", "under"],
    },
    "rules": {
        "S": [["NP", "VERB", "ADV?", "NP", "PP?"]],
        "NP": [["DET", "ADJ?", "NOUN"]],
        "PP": [["PREP", "NP"]],
    },
    "optional_prob": {"ADJ": 0.4, "ADV": 0.3, "PP": 0.4},
}


class Grammar:
    """A small regular grammar over word categories with a membership test."""

    def __init__(self, spec: dict = GRAMMAR):
        self.spec = spec
        self.category_of = {w: c for c, ws in spec["categories"].items() for w in ws}
        self._re = re.compile("^" + self._pattern("S") + "$")

    @property
    def terminals(self) -> list[str]:
        return [w for ws in self.spec["categories"].values() for w in ws]

    def _pattern(self, symbol: str) -> str:
        if symbol in self.spec["categories"]:
            return f"(?:{symbol} )"
        (expansion,) = self.spec["rules"][symbol]
        parts = []
        for item in expansion:
            opt = item.endswith("?")
            inner = self._pattern(item.rstrip("?"))
            parts.append(f"(?:{inner})?" if opt else inner)
        return "".join(parts)

    def accepts(self, words: Sequence[str]) -> bool:
        cats = []
        for w in words:
            c = self.category_of.get(w)
            if c is None:
                return False
            cats.append(c + " ")
        return bool(self._re.match("".join(cats)))

    def sample(self, rng: np.random.Generator, symbol: str = "S") -> list[str]:
        if symbol in self.spec["categories"]:
            words = self.spec["categories"][symbol]
            return [words[rng.integers(len(words))]]
        (expansion,) = self.spec["rules"][symbol]
        out: list[str] = []
        for item in expansion:
            name = item.rstrip("?")
            if item.endswith("?") and rng.random() >= self.spec["optional_prob"][name]:
                continue
            out.extend(self.sample(rng, name))
        return out

    def to_json(self) -> str:
        return json.dumps(self.spec, indent=2, sort_keys=True)


def synth_grammar(seed: int, n_sentences: int) -> tuple[list[str], Grammar]:
    """Sample sentences (5 to 12 words) from the toy grammar."""
    if n_sentences < 1:
        raise ConfigError("n_sentences must be positive")
    rng = np.random.default_rng(seed)
    g = Grammar()
    return [detokenize(g.sample(rng)) for _ in range(n_sentences)], g


def grammar_rate(sentences: Sequence[Sequence[str]], grammar: Grammar) -> float:
    if not sentences:
        return 0.0
    return sum(grammar.accepts(s) for s in sentences) / len(sentences)


# batching ------------------------------------------------------------------

def pad_batch(seqs: Sequence[Sequence[int]], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    T = int(lengths.max()) if length is None else length
    ids = np.full((len(seqs), T), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s[:T]
    return ids, np.minimum(lengths, T)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(sentences: Sequence[Sequence[int]], batch: int, seed: int,
               epoch: int = 0, start: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One shuffled epoch of PAD-padded id matrices with their lengths.

    ``start`` skips that many batches, which is how a resumed run rejoins the stream.
    """
    if batch < 1:
        raise ConfigError("batch must be at least 1")
    order = epoch_order(len(sentences), seed, epoch)
    for b in range(start, (len(order) + batch - 1) // batch):
        idx = order[b * batch:(b + 1) * batch]
        yield pad_batch([sentences[i] for i in idx])
