"""Segment libraries: candidate extraction, capped sampling, persistence."""

from __future__ import annotations

import enum
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Iterable, Iterator

from .bpe import BpeModel, load_bpe, save_bpe
from .corpus_io import FeatureStore, UtteranceAlignment
from .errors import BadFormat, DanglingRef, EmptyCorpus, IoFailure, MissingBpe, MissingFile, UnknownGrapheme

LIB_MAGIC = "#SEGSPLICE-LIB v1"
SIL_KEY = "<sil>"
DEFAULT_SEED = 17


class Level(str, enum.Enum):
    WORD = "word"
    PIECE = "piece"
    GRAPHEME = "grapheme"
    SILENCE = "silence"

    def __str__(self):
        return self.value


SPEECH_LEVELS = (Level.WORD, Level.PIECE, Level.GRAPHEME)
DEFAULT_CAPS = {Level.WORD: 500, Level.PIECE: 500, Level.GRAPHEME: 100, Level.SILENCE: 500}


@dataclass(frozen=True, slots=True)
class SegmentRef:
    utt_id: str
    start_frame: int
    num_frames: int
    grapheme_count: int  # 0 for silence
    domain: str

    @property
    def end_frame(self) -> int:
        return self.start_frame + self.num_frames


@dataclass(frozen=True)
class DurationBounds:
    """Average frames per grapheme for speech units, max frames for silence."""

    min_avg: float = 2
    max_avg: float = 30
    sil_max: int = 50

    def accepts(self, ref: SegmentRef) -> bool:
        if ref.grapheme_count == 0:
            return 1 <= ref.num_frames <= self.sil_max
        return self.min_avg <= ref.num_frames / ref.grapheme_count <= self.max_avg


@dataclass
class UnitLibrary:
    level: Level
    cap: int
    entries: dict[str, list[SegmentRef]] = field(default_factory=dict)

    def __contains__(self, unit):
        return bool(self.entries.get(unit))

    def __len__(self):
        return len(self.entries)

    def get(self, unit) -> list[SegmentRef]:
        return self.entries.get(unit, [])

    @property
    def total_instances(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def refs(self) -> Iterator[tuple[str, SegmentRef]]:
        for unit, refs in self.entries.items():
            for ref in refs:
                yield unit, ref


@dataclass
class BuildSummary:
    seen: dict = field(default_factory=lambda: dict.fromkeys(Level, 0))
    filtered: dict = field(default_factory=lambda: dict.fromkeys(Level, 0))
    stored: dict = field(default_factory=lambda: dict.fromkeys(Level, 0))
    utterances: int = 0

    def format(self) -> str:
        lines = [f"utterances\t{self.utterances}", "level\tseen\tfiltered\tstored"]
        for level in Level:
            lines.append(f"{level}\t{self.seen[level]}\t{self.filtered[level]}\t{self.stored[level]}")
        return "\n".join(lines) + "\n"


class LibrarySet:
    def __init__(self, words, pieces, graphemes, silence, bpe: BpeModel, summary=None):
        self.words = words
        self.pieces = pieces
        self.graphemes = graphemes
        self.silence = silence
        self.bpe = bpe
        self.summary = summary
        self._by_domain: dict = {}
        self.memo: dict = {}  # per-word resolutions, filled lazily by synth

    def library(self, level: Level) -> UnitLibrary:
        return {
            Level.WORD: self.words,
            Level.PIECE: self.pieces,
            Level.GRAPHEME: self.graphemes,
            Level.SILENCE: self.silence,
        }[Level(level)]

    def __iter__(self):
        return iter((self.words, self.pieces, self.graphemes, self.silence))

    @property
    def domains(self) -> set[str]:
        return {ref.domain for lib in self for _, ref in lib.refs()}

    def instances(self, level: Level, unit: str, domain: str | None = None) -> list[SegmentRef]:
        """Stored refs for a unit, optionally restricted to one domain."""
        refs = self.library(level).get(unit)
        if domain is None:
            return refs
        key = (level, unit, domain)
        hit = self._by_domain.get(key)
        if hit is None:
            hit = self._by_domain[key] = [r for r in refs if r.domain == domain]
        return hit

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_by_domain"] = {}
        state["memo"] = {}
        return state

    def __eq__(self, other):
        if not isinstance(other, LibrarySet):
            return NotImplemented
        return list(self) == list(other) and self.bpe == other.bpe


def piece_bounds(symbols: list[str], pieces: list[str]) -> list[tuple[int, int]]:
    """Map each piece to the half-open range of symbols it joins."""
    bounds = []
    i = 0
    for piece in pieces:
        j, acc = i, ""
        while len(acc) < len(piece) and j < len(symbols):
            acc += symbols[j]
            j += 1
        if acc != piece:
            raise ValueError(f"pieces {pieces} do not tile symbols {symbols}")
        bounds.append((i, j))
        i = j
    if i != len(symbols):
        raise ValueError(f"pieces {pieces} do not tile symbols {symbols}")
    return bounds


def _all_candidates(alignment: UtteranceAlignment, bpe: BpeModel | None, bounds: DurationBounds):
    """Every candidate with its filter verdict, in a fixed order."""
    out = []
    utt, dom = alignment.utt_id, alignment.domain

    def emit(level, unit, start, length, count):
        ref = SegmentRef(utt, start, length, count, dom)
        out.append((level, unit, ref, bounds.accepts(ref)))

    for word in alignment.words:
        toks = alignment.word_tokens(word)
        start = toks[0].start_frame
        emit(Level.WORD, word.text, start, toks[-1].end_frame - start, len(toks))
        if bpe is not None:
            symbols = [t.symbol for t in toks]
            try:
                pieces = bpe.encode(symbols)
            except UnknownGrapheme:
                pieces = None
            if pieces is not None:
                spans = piece_bounds(symbols, pieces)
                for k, (piece, (i, j)) in enumerate(zip(pieces, spans)):
                    p_start = toks[i].start_frame
                    # gap frames inside a word go to the preceding piece so pieces tile the word
                    p_end = toks[j].start_frame if k + 1 < len(pieces) else toks[-1].end_frame
                    emit(Level.PIECE, piece, p_start, p_end - p_start, j - i)
        for t in toks:
            emit(Level.GRAPHEME, t.symbol, t.start_frame, t.num_frames, 1)

    for t in alignment.tokens:
        if t.is_silence:
            emit(Level.SILENCE, SIL_KEY, t.start_frame, min(t.num_frames, bounds.sil_max), 0)
    return out


def extract_candidates(
    alignment: UtteranceAlignment, bpe: BpeModel | None, bounds: DurationBounds | None = None
) -> list[tuple[Level, str, SegmentRef]]:
    """Word, piece, grapheme and silence candidates of one utterance.

    Silence longer than ``bounds.sil_max`` is trimmed to its first
    ``sil_max`` frames.  Speech candidates whose average frames per
    grapheme fall outside ``[min_avg, max_avg]`` are dropped.  Words
    with graphemes outside the BPE alphabet yield no piece candidates.
    """
    bounds = bounds or DurationBounds()
    return [(lvl, unit, ref) for lvl, unit, ref, ok in _all_candidates(alignment, bpe, bounds) if ok]


def _candidate_stream(alignments, bpe, bounds, jobs):
    if jobs <= 1:
        for a in alignments:
            yield _all_candidates(a, bpe, bounds)
        return
    with ProcessPoolExecutor(jobs) as pool:
        # map() yields in submission order, so the reservoir sees the serial sequence
        yield from pool.map(partial(_all_candidates, bpe=bpe, bounds=bounds), alignments, chunksize=32)


def build_libraries(
    alignments: Iterable[UtteranceAlignment],
    bpe: BpeModel,
    caps: dict | None = None,
    seed: int = DEFAULT_SEED,
    bounds: DurationBounds | None = None,
    domains: Iterable[str] | None = None,
    jobs: int = 1,
) -> LibrarySet:
    """Cap every unit's instances with a seeded reservoir sample.

    The result depends only on ``seed`` and the order of ``alignments``;
    ``jobs`` only parallelises candidate extraction.
    """
    caps = {**DEFAULT_CAPS, **{Level(k): v for k, v in (caps or {}).items()}}
    if any(c < 1 for c in caps.values()):
        raise ValueError(f"caps must be positive: {caps}")
    bounds = bounds or DurationBounds()
    keep = set(domains) if domains is not None else None
    if keep is not None:
        alignments = (a for a in alignments if a.domain in keep)

    summary = BuildSummary()

    def counted(stream):
        for a in stream:
            summary.utterances += 1
            yield a

    rng = random.Random(seed)
    libs = {level: UnitLibrary(level, caps[level]) for level in Level}
    seen_ok = {level: {} for level in Level}
    for cands in _candidate_stream(counted(alignments), bpe, bounds, jobs):
        for level, unit, ref, ok in cands:
            summary.seen[level] += 1
            if not ok:
                summary.filtered[level] += 1
                continue
            n = seen_ok[level].get(unit, 0) + 1
            seen_ok[level][unit] = n
            cap = caps[level]
            if n <= cap:
                libs[level].entries.setdefault(unit, []).append(ref)
            else:
                j = rng.randrange(n)
                if j < cap:
                    libs[level].entries[unit][j] = ref

    for level in Level:
        summary.stored[level] = libs[level].total_instances
    if not any(summary.stored.values()):
        raise EmptyCorpus("no segment candidates survived extraction")
    return LibrarySet(
        libs[Level.WORD], libs[Level.PIECE], libs[Level.GRAPHEME], libs[Level.SILENCE], bpe, summary
    )


def library_path(dirpath, level: Level) -> Path:
    return Path(dirpath) / f"{Level(level).value}.lib"


def bpe_path(dirpath) -> Path:
    return Path(dirpath) / "bpe.model"


def save_libraries(libs: LibrarySet, dirpath) -> None:
    dirpath = Path(dirpath)
    try:
        dirpath.mkdir(parents=True, exist_ok=True)
        for lib in libs:
            with open(library_path(dirpath, lib.level), "w", encoding="utf-8") as f:
                f.write(f"{LIB_MAGIC} level={lib.level.value} cap={lib.cap}\n")
                for unit, r in lib.refs():
                    f.write(f"{unit}\t{r.utt_id}\t{r.start_frame}\t{r.num_frames}\t{r.grapheme_count}\t{r.domain}\n")
    except OSError as e:
        raise IoFailure(str(e)) from e
    save_bpe(libs.bpe, bpe_path(dirpath))


def _load_library(path: Path, level: Level) -> UnitLibrary:
    if not path.is_file():
        raise MissingFile(f"library file not found: {path}")
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        prefix = f"{LIB_MAGIC} level={level.value} cap="
        if not header.startswith(prefix) or not header[len(prefix):].isdigit():
            raise BadFormat(f"{path}:1: bad header {header!r}")
        lib = UnitLibrary(level, int(header[len(prefix):]))
        for lineno, line in enumerate(f, start=2):
            parts = line.rstrip("\n").split("\t")
            try:
                unit, utt, start, length, count, domain = parts
                ref = SegmentRef(utt, int(start), int(length), int(count), domain)
            except ValueError:
                raise BadFormat(f"{path}:{lineno}: malformed row") from None
            if ref.start_frame < 0 or ref.num_frames < 1 or ref.grapheme_count < 0:
                raise BadFormat(f"{path}:{lineno}: negative or empty span")
            if (level is Level.SILENCE) != (ref.grapheme_count == 0):
                raise BadFormat(f"{path}:{lineno}: grapheme count {ref.grapheme_count} invalid for {level}")
            refs = lib.entries.setdefault(unit, [])
            refs.append(ref)
            if len(refs) > lib.cap:
                raise BadFormat(f"{path}:{lineno}: unit {unit!r} exceeds cap {lib.cap}")
    return lib


def dangling_refs(libs: LibrarySet, store: FeatureStore) -> list[str]:
    """Describe every stored ref that does not resolve inside ``store``."""
    bad = []
    for lib in libs:
        for unit, ref in lib.refs():
            if ref.utt_id not in store:
                bad.append(f"{lib.level}:{unit}: utterance {ref.utt_id!r} missing")
            elif ref.end_frame > store.num_frames(ref.utt_id):
                bad.append(
                    f"{lib.level}:{unit}: {ref.utt_id}[{ref.start_frame}:{ref.end_frame}] "
                    f"past end ({store.num_frames(ref.utt_id)} frames)"
                )
    return bad


def load_libraries(dirpath, store: FeatureStore | None = None) -> LibrarySet:
    dirpath = Path(dirpath)
    if not bpe_path(dirpath).is_file():
        raise MissingBpe(f"no BPE model next to libraries: {bpe_path(dirpath)}")
    bpe = load_bpe(bpe_path(dirpath))
    libs = LibrarySet(*(_load_library(library_path(dirpath, lvl), lvl) for lvl in Level), bpe)
    if store is not None:
        bad = dangling_refs(libs, store)
        if bad:
            raise DanglingRef(bad)
    return libs
