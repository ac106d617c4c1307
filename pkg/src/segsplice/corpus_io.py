"""Feature store and alignment file I/O.

The feature store is a pair of files sharing a base path:

* ``<base>.idx``: ``#SEGSPLICE-FEAT v1 dim=<D>`` followed by one
  ``utt_id<TAB>frame_offset<TAB>num_frames`` line per utterance.
* ``<base>.bin``: little-endian float32 frames, row-major, concatenated
  in index order.

Alignment files are TSV with a ``#SEGSPLICE-ALIGN v1`` header and one
``utt_id  domain  word_index  symbol  start_frame  num_frames`` row per
grapheme or silence token.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import regex

from .errors import (
    BadMagic,
    DimMismatch,
    DuplicateUttId,
    IoFailure,
    MalformedLine,
    MissingFile,
    NonContiguousWord,
    OverlapError,
    UnknownUtterance,
)

FEAT_MAGIC = "#SEGSPLICE-FEAT v1"
ALIGN_MAGIC = "#SEGSPLICE-ALIGN v1"
DEFAULT_DIM = 80
FRAME_DTYPE = np.dtype("<f4")

SIL_SYMBOL = "<sil>"
SIL_WORD_INDEX = "-"

_FEAT_HEADER = re.compile(r"^#SEGSPLICE-FEAT v1 dim=(\d+)$")
_GRAPHEME = regex.compile(r"\X")


def graphemes(text: str) -> list[str]:
    """Split text into extended grapheme clusters."""
    return _GRAPHEME.findall(text)


def store_paths(path) -> tuple[Path, Path]:
    """Return ``(index_path, data_path)`` for a store base path.

    A path already ending in ``.idx`` or ``.bin`` is accepted as well.
    """
    path = Path(path)
    if path.suffix in (".idx", ".bin"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".idx"), path.with_name(path.name + ".bin")


class FeatureStore:
    """Read-only random access to per-utterance feature matrices."""

    def __init__(self, dim: int, index: dict[str, tuple[int, int]], data: np.ndarray, path=None):
        self.dim = dim
        self.index = index
        self.data = data
        self.path = path

    def __len__(self):
        return len(self.index)

    def __contains__(self, utt_id):
        return utt_id in self.index

    def __iter__(self):
        return iter(self.index)

    @property
    def total_frames(self) -> int:
        return self.data.shape[0]

    def num_frames(self, utt_id: str) -> int:
        try:
            return self.index[utt_id][1]
        except KeyError:
            raise UnknownUtterance(f"no utterance {utt_id!r} in feature store") from None

    def slice(self, utt_id: str, start: int = 0, num_frames: int | None = None) -> np.ndarray:
        """Frames ``[start, start + num_frames)`` of one utterance.

        Requests reaching outside the utterance raise IndexError rather
        than returning frames of a neighbouring utterance.
        """
        offset, length = self.index.get(utt_id, (None, None))
        if offset is None:
            raise UnknownUtterance(f"no utterance {utt_id!r} in feature store")
        if num_frames is None:
            num_frames = length - start
        if start < 0 or num_frames < 0 or start + num_frames > length:
            raise IndexError(
                f"span [{start}, {start + num_frames}) outside {utt_id!r} ({length} frames)"
            )
        return self.data[offset + start : offset + start + num_frames]

    def matrix(self, utt_id: str) -> np.ndarray:
        return self.slice(utt_id)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for utt_id in self.index:
            yield utt_id, self.matrix(utt_id)

    # memmaps do not pickle usefully; worker processes reopen by path
    def __getstate__(self):
        if self.path is None:
            return self.__dict__
        return {"path": self.path}

    def __setstate__(self, state):
        if set(state) == {"path"}:
            self.__dict__.update(open_feature_store(state["path"]).__dict__)
        else:
            self.__dict__.update(state)


def open_feature_store(path) -> FeatureStore:
    index_path, data_path = store_paths(path)
    for p in (index_path, data_path):
        if not p.is_file():
            raise MissingFile(f"feature store file not found: {p}")

    with open(index_path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        m = _FEAT_HEADER.match(header)
        if not m or int(m.group(1)) <= 0:
            raise BadMagic(f"{index_path}: bad header {header!r}, expected '{FEAT_MAGIC} dim=<D>'")
        dim = int(m.group(1))
        index: dict[str, tuple[int, int]] = {}
        for lineno, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            try:
                utt_id, offset, length = parts[0], int(parts[1]), int(parts[2])
            except (IndexError, ValueError):
                raise BadMagic(f"{index_path}:{lineno}: malformed index line {line!r}") from None
            if len(parts) != 3 or offset < 0 or length < 0:
                raise BadMagic(f"{index_path}:{lineno}: malformed index line {line!r}")
            if utt_id in index:
                raise DuplicateUttId(f"{index_path}:{lineno}: duplicate utterance {utt_id!r}")
            index[utt_id] = (offset, length)

    nbytes = data_path.stat().st_size
    row_bytes = dim * FRAME_DTYPE.itemsize
    if nbytes % row_bytes:
        raise DimMismatch(f"{data_path}: {nbytes} bytes is not a whole number of dim={dim} frames")
    total = nbytes // row_bytes
    for utt_id, (offset, length) in index.items():
        if offset + length > total:
            raise DimMismatch(
                f"{index_path}: {utt_id!r} spans frames [{offset}, {offset + length}) "
                f"but data holds only {total} frames"
            )

    if total:
        data = np.memmap(data_path, dtype=FRAME_DTYPE, mode="r", shape=(total, dim))
    else:
        data = np.zeros((0, dim), dtype=FRAME_DTYPE)
    return FeatureStore(dim, index, data, path=str(index_path.with_suffix("")))


class FeatureStoreWriter:
    """Append utterances to a new feature store one at a time.

    Only the index is kept in memory; frames go straight to disk.
    """

    def __init__(self, path, dim: int | None = None):
        self.index_path, self.data_path = store_paths(path)
        self.dim = dim
        self._index: dict[str, tuple[int, int]] = {}
        self._frames = 0
        try:
            self.index_path.parent.mkdir(parents=True, exist_ok=True)
            self._data = open(self.data_path, "wb")
        except OSError as e:
            raise IoFailure(str(e)) from e

    def add(self, utt_id: str, matrix) -> None:
        matrix = np.asarray(matrix)
        if matrix.ndim != 2:
            raise DimMismatch(f"{utt_id!r}: expected a 2-d matrix, got shape {matrix.shape}")
        if self.dim is None:
            self.dim = matrix.shape[1]
        if matrix.shape[1] != self.dim or self.dim <= 0:
            raise DimMismatch(f"{utt_id!r}: dim {matrix.shape[1]} != store dim {self.dim}")
        if utt_id in self._index:
            raise DuplicateUttId(f"duplicate utterance {utt_id!r}")
        if not utt_id or any(c in utt_id for c in "\t\n"):
            raise IoFailure(f"utterance id {utt_id!r} cannot be stored")
        try:
            self._data.write(np.ascontiguousarray(matrix, dtype=FRAME_DTYPE).tobytes())
        except OSError as e:
            raise IoFailure(str(e)) from e
        self._index[utt_id] = (self._frames, matrix.shape[0])
        self._frames += matrix.shape[0]

    def close(self) -> None:
        if self._data.closed:
            return
        try:
            self._data.close()
            with open(self.index_path, "w", encoding="utf-8") as f:
                f.write(f"{FEAT_MAGIC} dim={self.dim or DEFAULT_DIM}\n")
                for utt_id, (offset, length) in self._index.items():
                    f.write(f"{utt_id}\t{offset}\t{length}\n")
        except OSError as e:
            raise IoFailure(str(e)) from e

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_feature_store(entries: Iterable[tuple[str, np.ndarray]], path, dim: int | None = None) -> None:
    with FeatureStoreWriter(path, dim=dim) as writer:
        for utt_id, matrix in entries:
            writer.add(utt_id, matrix)


@dataclass(frozen=True, slots=True)
class AlignmentToken:
    utt_id: str
    domain: str
    word_index: int | None  # None marks silence
    symbol: str
    start_frame: int
    num_frames: int

    @property
    def is_silence(self) -> bool:
        return self.word_index is None

    @property
    def end_frame(self) -> int:
        return self.start_frame + self.num_frames


@dataclass(frozen=True, slots=True)
class Word:
    text: str
    word_index: int
    first: int  # token positions, half-open
    last: int


@dataclass
class UtteranceAlignment:
    utt_id: str
    domain: str
    tokens: list[AlignmentToken]
    words: list[Word] = field(default_factory=list)

    def word_tokens(self, word: Word) -> list[AlignmentToken]:
        return self.tokens[word.first : word.last]

    @property
    def transcript(self) -> str:
        return " ".join(w.text for w in self.words)


def group_words(tokens: list[AlignmentToken]) -> list[Word]:
    """Group consecutive tokens sharing a word index into words."""
    words = []
    seen = set()
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok.is_silence:
            i += 1
            continue
        if tok.word_index in seen:
            raise NonContiguousWord(f"{tok.utt_id}: word {tok.word_index} is interrupted")
        seen.add(tok.word_index)
        j = i
        while j < len(tokens) and tokens[j].word_index == tok.word_index:
            j += 1
        words.append(Word("".join(t.symbol for t in tokens[i:j]), tok.word_index, i, j))
        i = j
    return words


def _parse_token(line: str, where: str) -> AlignmentToken:
    parts = line.split("\t")
    if len(parts) != 6:
        raise MalformedLine(f"{where}: expected 6 tab-separated columns, got {len(parts)}")
    utt_id, domain, word_index, symbol, start, length = parts
    if not utt_id or not domain:
        raise MalformedLine(f"{where}: empty utterance id or domain")
    try:
        start, length = int(start), int(length)
    except ValueError:
        raise MalformedLine(f"{where}: non-integer frame fields") from None
    if start < 0 or length < 1:
        raise MalformedLine(f"{where}: need start_frame >= 0 and num_frames >= 1")
    if word_index == SIL_WORD_INDEX:
        if symbol != SIL_SYMBOL:
            raise MalformedLine(f"{where}: silence row must carry symbol {SIL_SYMBOL}")
        return AlignmentToken(utt_id, domain, None, SIL_SYMBOL, start, length)
    try:
        word_index = int(word_index)
    except ValueError:
        raise MalformedLine(f"{where}: bad word index {word_index!r}") from None
    if word_index < 0:
        raise MalformedLine(f"{where}: negative word index")
    if len(graphemes(symbol)) != 1 or symbol == SIL_SYMBOL:
        raise MalformedLine(f"{where}: symbol {symbol!r} is not a single grapheme")
    return AlignmentToken(utt_id, domain, word_index, symbol, start, length)


def _finish(utt_id, domain, tokens, where, store) -> UtteranceAlignment:
    for prev, tok in zip(tokens, tokens[1:]):
        if tok.start_frame < prev.end_frame:
            raise OverlapError(
                f"{where}: {utt_id} token at frame {tok.start_frame} starts before "
                f"previous token ends ({prev.end_frame})"
            )
    if store is not None:
        if utt_id not in store:
            raise UnknownUtterance(f"{where}: utterance {utt_id!r} not in feature store")
        if tokens[-1].end_frame > store.num_frames(utt_id):
            raise MalformedLine(
                f"{where}: {utt_id} alignment ends at frame {tokens[-1].end_frame} "
                f"but the utterance has {store.num_frames(utt_id)} frames"
            )
    try:
        words = group_words(tokens)
    except NonContiguousWord as e:
        raise NonContiguousWord(f"{where}: {e}") from None
    return UtteranceAlignment(utt_id, domain, tokens, words)


def iter_alignments(path, store: FeatureStore | None = None) -> Iterator[UtteranceAlignment]:
    """Stream validated utterances from an alignment file.

    Rows of one utterance must be adjacent in the file.  If ``store`` is
    given every utterance must exist there and fit inside its frames.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"alignment file not found: {path}")
    done: set[str] = set()
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != ALIGN_MAGIC:
            raise MalformedLine(f"{path}:1: bad header {header!r}, expected {ALIGN_MAGIC!r}")
        cur_id = cur_domain = None
        cur: list[AlignmentToken] = []
        start_line = 0
        for lineno, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            where = f"{path}:{lineno}"
            tok = _parse_token(line, where)
            if tok.utt_id != cur_id:
                if cur:
                    yield _finish(cur_id, cur_domain, cur, f"{path}:{start_line}", store)
                    done.add(cur_id)
                if tok.utt_id in done:
                    raise MalformedLine(f"{where}: rows of utterance {tok.utt_id!r} are not adjacent")
                cur_id, cur_domain, cur, start_line = tok.utt_id, tok.domain, [], lineno
            elif tok.domain != cur_domain:
                raise MalformedLine(f"{where}: utterance {cur_id!r} changes domain")
            cur.append(tok)
        if cur:
            yield _finish(cur_id, cur_domain, cur, f"{path}:{start_line}", store)


def parse_alignments(path, store: FeatureStore | None = None) -> list[UtteranceAlignment]:
    return list(iter_alignments(path, store))


def write_alignments(utterances: Iterable[UtteranceAlignment], path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(ALIGN_MAGIC + "\n")
            for utt in utterances:
                for t in utt.tokens:
                    wi = SIL_WORD_INDEX if t.is_silence else str(t.word_index)
                    f.write(f"{utt.utt_id}\t{utt.domain}\t{wi}\t{t.symbol}\t{t.start_frame}\t{t.num_frames}\n")
    except OSError as e:
        raise IoFailure(str(e)) from e


def make_utterance(utt_id: str, domain: str, layout: Iterable[tuple[str, list[int]] | int], start: int = 0):
    """Build an UtteranceAlignment from ``(word, grapheme_durations)`` pairs.

    A bare int in ``layout`` inserts a silence token of that many frames.
    Mostly a convenience for tests and toy corpora.
    """
    tokens = []
    frame = start
    word_index = 0
    for item in layout:
        if isinstance(item, int):
            tokens.append(AlignmentToken(utt_id, domain, None, SIL_SYMBOL, frame, item))
            frame += item
            continue
        word, durations = item
        syms = graphemes(word)
        if len(syms) != len(durations):
            raise ValueError(f"{word!r}: {len(syms)} graphemes but {len(durations)} durations")
        for sym, n in zip(syms, durations):
            tokens.append(AlignmentToken(utt_id, domain, word_index, sym, frame, n))
            frame += n
        word_index += 1
    return UtteranceAlignment(utt_id, domain, tokens, group_words(tokens))

