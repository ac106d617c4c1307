"""Word-internal byte-pair encoding over grapheme clusters.

Merges never cross word boundaries and there is no end-of-word marker,
so every piece covers a contiguous grapheme range of its word.
"""

from __future__ import annotations

import heapq
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .corpus_io import graphemes
from .errors import BadFormat, EmptyCorpus, IoFailure, MissingFile, TargetTooSmall, UnknownGrapheme

BPE_MAGIC = "#SEGSPLICE-BPE v1"
MIN_PAIR_FREQ = 2


def merge_pair(symbols: Sequence[str], left: str, right: str) -> list[str]:
    """Replace every left-to-right, non-overlapping ``left right`` with their join."""
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


@dataclass
class BpeModel:
    alphabet: frozenset
    merges: list[tuple[str, str]]
    _ranks: dict = field(init=False, repr=False, compare=False)
    _cache: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.alphabet = frozenset(self.alphabet)
        self.merges = [tuple(m) for m in self.merges]
        self._ranks = {m: r for r, m in enumerate(self.merges)}
        self._cache = {}

    @property
    def vocab(self) -> set[str]:
        return set(self.alphabet) | {a + b for a, b in self.merges}

    def truncated(self, k: int) -> "BpeModel":
        return BpeModel(self.alphabet, self.merges[:k])

    def encode(self, symbols: Sequence[str]) -> list[str]:
        """Pieces for a word given as a grapheme sequence."""
        key = tuple(symbols)
        cached = self._cache.get(key)
        if cached is not None:
            return list(cached)
        unknown = [s for s in key if s not in self.alphabet]
        if unknown:
            raise UnknownGrapheme(unknown)
        pieces = list(key)
        ranks = self._ranks
        while len(pieces) > 1:
            best = None
            best_rank = len(ranks)
            for pair in zip(pieces, pieces[1:]):
                r = ranks.get(pair)
                if r is not None and r < best_rank:
                    best, best_rank = pair, r
            if best is None:
                break
            pieces = merge_pair(pieces, *best)
        self._cache[key] = tuple(pieces)
        return pieces

    def tokenize(self, word: str) -> list[str]:
        return self.encode(graphemes(word))

    def __getstate__(self):
        return {"alphabet": self.alphabet, "merges": self.merges}

    def __setstate__(self, state):
        self.alphabet = state["alphabet"]
        self.merges = state["merges"]
        self.__post_init__()


def tokenize(word: str, model: BpeModel) -> list[str]:
    return model.tokenize(word)


def train_bpe(word_counts: Mapping[str, int], target_vocab_size: int) -> BpeModel:
    """Greedy BPE training over word types weighted by count.

    Each step merges the most frequent adjacent pair.  Ties go to the
    lexicographically smallest joined string, then the smallest left
    piece.  Pairs whose join is already in the vocabulary are never
    chosen, so the vocabulary grows by exactly one per merge.  Training
    stops at ``target_vocab_size`` or when no pair occurs twice.
    """
    words: list[list[str]] = []
    counts: list[int] = []
    for word, count in word_counts.items():
        if count < 1:
            raise ValueError(f"count for {word!r} must be >= 1, got {count}")
        syms = graphemes(word)
        if not syms:
            continue
        if any(s.isspace() for s in syms):
            raise ValueError(f"word {word!r} contains whitespace")
        words.append(syms)
        counts.append(count)
    if not words:
        raise EmptyCorpus("no words to train on")

    alphabet = frozenset(s for w in words for s in w)
    if target_vocab_size < len(alphabet):
        raise TargetTooSmall(
            f"target vocab size {target_vocab_size} is below the alphabet size {len(alphabet)}"
        )
    vocab = set(alphabet)

    pair_counts: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for i, (w, c) in enumerate(zip(words, counts)):
        for pair in zip(w, w[1:]):
            pair_counts[pair] += c
            where[pair].add(i)
    heap = [(-c, a + b, a, b) for (a, b), c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[str, str]] = []
    while heap and len(vocab) < target_vocab_size:
        neg, joined, a, b = heapq.heappop(heap)
        if pair_counts.get((a, b), 0) != -neg or joined in vocab:
            continue
        if -neg < MIN_PAIR_FREQ:
            break
        merges.append((a, b))
        vocab.add(joined)

        touched = set()
        for i in list(where[(a, b)]):
            old = words[i]
            new = merge_pair(old, a, b)
            c = counts[i]
            for pair in zip(old, old[1:]):
                pair_counts[pair] -= c
                where[pair].discard(i)
                touched.add(pair)
            for pair in zip(new, new[1:]):
                pair_counts[pair] += c
                where[pair].add(i)
                touched.add(pair)
            words[i] = new
        for pair in touched:
            c = pair_counts[pair]
            if c <= 0:
                del pair_counts[pair]
                where.pop(pair, None)
            else:
                heapq.heappush(heap, (-c, pair[0] + pair[1], pair[0], pair[1]))

    return BpeModel(alphabet, merges)


def save_bpe(model: BpeModel, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(BPE_MAGIC + "\n")
            f.write(" ".join(sorted(model.alphabet)) + "\n")
            for a, b in model.merges:
                f.write(f"{a}\t{b}\n")
    except OSError as e:
        raise IoFailure(str(e)) from e


def load_bpe(path) -> BpeModel:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"BPE model not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise BadFormat(f"{path}: {e}") from None
    if not text.endswith("\n"):
        raise BadFormat(f"{path}: truncated (no final newline)")
    lines = text[:-1].split("\n")
    if lines[0] != BPE_MAGIC:
        raise BadFormat(f"{path}: bad header {lines[0]!r}")
    if len(lines) < 2 or not lines[1].strip():
        raise BadFormat(f"{path}: missing alphabet line")
    alphabet = lines[1].split(" ")
    if "" in alphabet or len(set(alphabet)) != len(alphabet):
        raise BadFormat(f"{path}: malformed alphabet line")
    vocab = set(alphabet)
    merges = []
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split("\t")
        if len(parts) != 2 or not all(parts):
            raise BadFormat(f"{path}:{lineno}: expected 'left<TAB>right'")
        a, b = parts
        if a not in vocab or b not in vocab or a + b in vocab:
            raise BadFormat(f"{path}:{lineno}: merge {a!r}+{b!r} inconsistent with earlier entries")
        merges.append((a, b))
        vocab.add(a + b)
    return BpeModel(frozenset(alphabet), merges)
