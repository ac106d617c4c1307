"""Corpus diagnostics: coverage by unit level, duration histograms, unit counts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .bpe import BpeModel
from .corpus_io import UtteranceAlignment
from .errors import UncoverableWord, UnknownGrapheme
from .seglib import DurationBounds, Level, LibrarySet, _all_candidates
from .synth import normalize_text, resolve_word

DEFAULT_BIN_WIDTH = 5

_RANK = {Level.WORD: 0, Level.PIECE: 1, Level.GRAPHEME: 2}


def _table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for r in cells:
        first = r[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join([first] + rest).rstrip())
    return "\n".join(lines) + "\n"


def _kv(pairs: list[tuple[str, object]]) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs)


def classify_sentence(sentence: str, libs: LibrarySet) -> Level | None:
    """Weakest level any word of the sentence needs; None if uncoverable."""
    worst = Level.WORD
    for word in sentence.split():
        try:
            level, _ = resolve_word(word, libs)
        except UncoverableWord:
            return None
        if _RANK[level] > _RANK[worst]:
            worst = level
    return worst


@dataclass
class CoverageReport:
    total: int = 0
    word_only: int = 0
    needs_piece: int = 0
    needs_grapheme: int = 0
    uncoverable: int = 0

    def _frac(self, n):
        return n / self.total if self.total else 0.0

    @property
    def frac_word_only(self) -> float:
        return self._frac(self.word_only)

    @property
    def frac_word_piece(self) -> float:
        """Cumulative: covered using words and pieces only."""
        return self._frac(self.word_only + self.needs_piece)

    @property
    def frac_grapheme(self) -> float:
        return self._frac(self.needs_grapheme)

    @property
    def frac_uncoverable(self) -> float:
        return self._frac(self.uncoverable)

    def as_table(self) -> str:
        rows = [
            ["word only", self.word_only, f"{self.frac_word_only:.4f}"],
            ["word+piece", self.word_only + self.needs_piece, f"{self.frac_word_piece:.4f}"],
            ["needs grapheme", self.needs_grapheme, f"{self.frac_grapheme:.4f}"],
            ["uncoverable", self.uncoverable, f"{self.frac_uncoverable:.4f}"],
            ["total", self.total, "1.0000" if self.total else "0.0000"],
        ]
        return _table(["coverage", "sentences", "fraction"], rows)

    def as_kv(self) -> str:
        return _kv([
            ("total", self.total),
            ("word_only", self.word_only),
            ("needs_piece", self.needs_piece),
            ("needs_grapheme", self.needs_grapheme),
            ("uncoverable", self.uncoverable),
            ("frac_word_only", repr(self.frac_word_only)),
            ("frac_word_piece", repr(self.frac_word_piece)),
            ("frac_grapheme", repr(self.frac_grapheme)),
            ("frac_uncoverable", repr(self.frac_uncoverable)),
        ])


def coverage(sentences: Iterable[str], libs: LibrarySet, normalize: bool = True) -> CoverageReport:
    """Classify sentences by the weakest unit level needed to realize them.

    Uses the same per-word resolution as synthesis.  Sentences that are
    empty after normalization are not counted.
    """
    rep = CoverageReport()
    for raw in sentences:
        text = normalize_text(raw) if normalize else raw
        if not text.split():
            continue
        rep.total += 1
        level = classify_sentence(text, libs)
        if level is None:
            rep.uncoverable += 1
        elif level is Level.WORD:
            rep.word_only += 1
        elif level is Level.PIECE:
            rep.needs_piece += 1
        else:
            rep.needs_grapheme += 1
    return rep


@dataclass
class DurationHistogram:
    level: Level
    bin_width: int
    bins: list[int] = field(default_factory=list)
    pre_filter: bool = False
    max_avg: float = 0.0

    @property
    def count(self) -> int:
        return sum(self.bins)

    def add(self, num_frames: int, grapheme_count: int) -> None:
        # integer floor of (num_frames / grapheme_count) / bin_width
        k = num_frames // (grapheme_count * self.bin_width)
        if k >= len(self.bins):
            self.bins.extend([0] * (k + 1 - len(self.bins)))
        self.bins[k] += 1
        self.max_avg = max(self.max_avg, num_frames / grapheme_count)

    def mass_above(self, frames: float) -> int:
        """Units in bins lying entirely above ``frames``."""
        return sum(n for k, n in enumerate(self.bins) if k * self.bin_width > frames)

    def as_table(self) -> str:
        w = self.bin_width
        rows = [[f"[{k * w},{(k + 1) * w})", n] for k, n in enumerate(self.bins)]
        rows.append(["total", self.count])
        mode = "pre-filter" if self.pre_filter else "stored"
        return _table([f"{self.level} avg frames/grapheme ({mode})", "count"], rows)

    def as_kv(self) -> str:
        w = self.bin_width
        pairs = [("level", self.level.value), ("bin_width", w), ("pre_filter", int(self.pre_filter)),
                 ("total", self.count), ("max_avg", repr(self.max_avg))]
        pairs += [(f"bin.{k * w}-{(k + 1) * w}", n) for k, n in enumerate(self.bins)]
        return _kv(pairs)


def duration_histogram(libs: LibrarySet, level: Level, bin_width: int = DEFAULT_BIN_WIDTH) -> DurationHistogram:
    level = Level(level)
    if level not in (Level.WORD, Level.PIECE):
        raise ValueError("duration histograms are defined for word and piece levels")
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    hist = DurationHistogram(level, bin_width)
    for _, ref in libs.library(level).refs():
        hist.add(ref.num_frames, ref.grapheme_count)
    return hist


def candidate_duration_histogram(
    alignments: Iterable[UtteranceAlignment], bpe: BpeModel | None, level: Level,
    bin_width: int = DEFAULT_BIN_WIDTH,
) -> DurationHistogram:
    """Histogram over every extracted candidate, before duration filtering."""
    level = Level(level)
    if level not in (Level.WORD, Level.PIECE):
        raise ValueError("duration histograms are defined for word and piece levels")
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    hist = DurationHistogram(level, bin_width, pre_filter=True)
    bounds = DurationBounds()
    for a in alignments:
        for lvl, _, ref, _ in _all_candidates(a, bpe if level is Level.PIECE else None, bounds):
            if lvl is level:
                hist.add(ref.num_frames, ref.grapheme_count)
    return hist


@dataclass
class UnitCountReport:
    # domain -> (words, pieces, graphemes)
    counts: dict[str, tuple[int, int, int]] = field(default_factory=dict)

    def as_table(self) -> str:
        rows = [[d, *self.counts[d]] for d in sorted(self.counts)]
        return _table(["corpus", "word", "piece", "grapheme"], rows)

    def as_kv(self) -> str:
        pairs = []
        for d in sorted(self.counts):
            w, p, g = self.counts[d]
            pairs += [(f"{d}.word", w), (f"{d}.piece", p), (f"{d}.grapheme", g)]
        return _kv(pairs)


ALL_DOMAINS = "all"


def unit_counts(source, per_domain: bool = True, bpe: BpeModel | None = None) -> UnitCountReport:
    """Distinct word, piece and grapheme strings, per domain or pooled.

    ``source`` is a LibrarySet (counts stored unit keys) or an iterable
    of UtteranceAlignment (counts raw units; pieces need ``bpe``).
    """
    sets: dict[str, tuple[set, set, set]] = {}

    def bucket(domain):
        key = domain if per_domain else ALL_DOMAINS
        if key not in sets:
            sets[key] = (set(), set(), set())
        return sets[key]

    if isinstance(source, LibrarySet):
        for i, lib in enumerate((source.words, source.pieces, source.graphemes)):
            for unit, ref in lib.refs():
                bucket(ref.domain)[i].add(unit)
    else:
        for utt in source:
            words, pieces, graphs = bucket(utt.domain)
            for w in utt.words:
                words.add(w.text)
                syms = [t.symbol for t in utt.word_tokens(w)]
                graphs.update(syms)
                if bpe is not None:
                    try:
                        pieces.update(bpe.encode(syms))
                    except UnknownGrapheme:
                        pass
    return UnitCountReport({d: tuple(len(s) for s in v) for d, v in sets.items()})
