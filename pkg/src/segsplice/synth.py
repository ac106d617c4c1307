"""Text-to-features synthesis by hierarchical unit selection and splicing."""

from __future__ import annotations

import json
import random
import unicodedata
from collections import Counter, deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .corpus_io import FRAME_DTYPE, FeatureStore, FeatureStoreWriter, graphemes
from .errors import DanglingRef, DomainExhausted, IoFailure, SegspliceError, UncoverableWord, UnknownGrapheme
from .seglib import DEFAULT_SEED, SIL_KEY, Level, LibrarySet, SegmentRef

SIL_FALLBACK_FRAMES = 10
FLAG_SIL_FALLBACK = "sil_fallback"

_MASK64 = (1 << 64) - 1


def normalize_text(raw: str) -> str:
    """Lowercase, keep letters, marks, digits and apostrophes, collapse spaces."""
    text = unicodedata.normalize("NFC", raw).lower().replace("’", "'")
    kept = []
    for c in text:
        cat = unicodedata.category(c)
        kept.append(c if c == "'" or cat[0] in "LM" or cat == "Nd" else " ")
    return " ".join("".join(kept).split())


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def sentence_rng(seed: int, index: int) -> random.Random:
    """Independent RNG stream for sentence ``index`` under ``seed``."""
    return random.Random(splitmix64(splitmix64(seed & _MASK64) ^ (index & _MASK64)))


class PlanUnit(NamedTuple):
    level: Level
    unit: str
    word: int  # ordinal of the word in the sentence


@dataclass
class SynthesisPlan:
    sentence_id: str
    text: str
    units: list[PlanUnit]
    resolution: list[Level]

    @property
    def words(self) -> list[str]:
        return self.text.split()


def resolve_word(word: str, libs: LibrarySet) -> tuple[Level, list[str]]:
    """Largest unit level covering ``word``: whole word, then pieces, then graphemes.

    Raises UncoverableWord naming the graphemes no library can supply.
    """
    hit = libs.memo.get(word)
    if hit is not None:
        return hit
    if word in libs.words:
        hit = (Level.WORD, [word])
    else:
        syms = graphemes(word)
        try:
            pieces = libs.bpe.encode(syms)
        except UnknownGrapheme:
            pieces = None
        if pieces is not None and all(p in libs.pieces for p in pieces):
            hit = (Level.PIECE, pieces)
        else:
            missing = [g for g in syms if g not in libs.graphemes]
            if missing:
                raise UncoverableWord(word, missing)
            hit = (Level.GRAPHEME, syms)
    libs.memo[word] = hit
    return hit


def plan_units(sentence: str, libs: LibrarySet, sentence_id: str = "") -> SynthesisPlan:
    units, resolution = [], []
    for k, word in enumerate(sentence.split()):
        level, parts = resolve_word(word, libs)
        resolution.append(level)
        units.extend(PlanUnit(level, p, k) for p in parts)
    return SynthesisPlan(sentence_id, sentence, units, resolution)


class ResolvedSpan(NamedTuple):
    kind: str  # "UNIT" or "SIL"
    unit: str
    ref: SegmentRef | None  # None for a fallback silence block
    word: int | None
    num_frames: int


@dataclass
class ResolvedPlan:
    plan: SynthesisPlan
    domain: str | None
    spans: list[ResolvedSpan]
    flags: list[str] = field(default_factory=list)


def sample_instances(
    plan: SynthesisPlan, libs: LibrarySet, domain: str | None, rng: random.Random
) -> ResolvedPlan:
    """Draw one stored instance per unit and one silence between words.

    With ``domain`` set, only instances from that domain are eligible,
    silences included.  When no silence is available a zero block of
    SIL_FALLBACK_FRAMES frames is used and the plan is flagged.
    """
    pools = [libs.instances(u.level, u.unit, domain) for u in plan.units]
    if domain is not None:
        empty = [f"{u.level}:{u.unit}" for u, pool in zip(plan.units, pools) if not pool]
        if empty:
            raise DomainExhausted(domain, dict.fromkeys(empty))
    silences = libs.instances(Level.SILENCE, SIL_KEY, domain)

    spans, flags = [], []
    prev_word = None
    for u, pool in zip(plan.units, pools):
        if prev_word is not None and u.word != prev_word:
            if silences:
                ref = silences[rng.randrange(len(silences))]
                spans.append(ResolvedSpan("SIL", SIL_KEY, ref, None, ref.num_frames))
            else:
                spans.append(ResolvedSpan("SIL", SIL_KEY, None, None, SIL_FALLBACK_FRAMES))
                if FLAG_SIL_FALLBACK not in flags:
                    flags.append(FLAG_SIL_FALLBACK)
        ref = pool[rng.randrange(len(pool))]
        spans.append(ResolvedSpan("UNIT", u.unit, ref, u.word, ref.num_frames))
        prev_word = u.word
    return ResolvedPlan(plan, domain, spans, flags)


class ManifestSpan(NamedTuple):
    kind: str
    unit: str
    utt_id: str | None
    start: int
    length: int
    word: int | None


@dataclass
class ManifestEntry:
    sentence_id: str
    text: str
    domain: str
    total_frames: int
    spans: list[ManifestSpan]
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.sentence_id,
                "text": self.text,
                "domain": self.domain,
                "total_frames": self.total_frames,
                "spans": [s._asdict() for s in self.spans],
                "flags": self.flags,
            },
            ensure_ascii=False,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        d = json.loads(line)
        return cls(
            d["id"], d["text"], d["domain"], d["total_frames"],
            [ManifestSpan(**s) for s in d["spans"]], d.get("flags", []),
        )

    def spelled_text(self) -> str:
        """Rebuild the sentence from UNIT spans and their word ordinals."""
        words: dict[int, str] = {}
        for s in self.spans:
            if s.kind == "UNIT":
                words[s.word] = words.get(s.word, "") + s.unit
        return " ".join(words[k] for k in sorted(words))


def splice(resolved: ResolvedPlan, store: FeatureStore) -> tuple[np.ndarray, ManifestEntry]:
    bad = []
    for s in resolved.spans:
        r = s.ref
        if r is None:
            continue
        if r.utt_id not in store:
            bad.append(f"{s.unit}: utterance {r.utt_id!r} missing")
        elif r.start_frame < 0 or r.end_frame > store.num_frames(r.utt_id):
            bad.append(f"{s.unit}: {r.utt_id}[{r.start_frame}:{r.end_frame}] out of range")
    if bad:
        raise DanglingRef(bad)

    blocks = []
    for s in resolved.spans:
        if s.ref is None:
            blocks.append(np.zeros((s.num_frames, store.dim), dtype=FRAME_DTYPE))
        else:
            blocks.append(store.slice(s.ref.utt_id, s.ref.start_frame, s.ref.num_frames))
    if blocks:
        matrix = np.concatenate(blocks, axis=0)
    else:
        matrix = np.zeros((0, store.dim), dtype=FRAME_DTYPE)

    spans = [
        ManifestSpan(
            s.kind, s.unit,
            s.ref.utt_id if s.ref else None,
            s.ref.start_frame if s.ref else 0,
            s.num_frames, s.word,
        )
        for s in resolved.spans
    ]
    entry = ManifestEntry(
        resolved.plan.sentence_id,
        resolved.plan.text,
        resolved.domain if resolved.domain is not None else "any",
        int(matrix.shape[0]),
        spans,
        list(resolved.flags),
    )
    return matrix, entry


@dataclass(frozen=True)
class DomainPolicy:
    """``any``, ``fixed=D`` or ``round-robin=A,B,C``."""

    kind: str = "any"
    domains: tuple[str, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "DomainPolicy":
        name, _, arg = text.partition("=")
        name = name.strip().lower().replace("_", "-")
        doms = tuple(d.strip() for d in arg.split(",") if d.strip())
        if name == "any" and not arg:
            return cls("any")
        if name == "fixed" and len(doms) == 1:
            return cls("fixed", doms)
        if name == "round-robin" and doms:
            return cls("round-robin", doms)
        raise ValueError(f"bad domain policy {text!r}; use any, fixed=D or round-robin=A,B,...")

    def domain_for(self, index: int) -> str | None:
        if self.kind == "any":
            return None
        if self.kind == "fixed":
            return self.domains[0]
        return self.domains[index % len(self.domains)]

    def __str__(self):
        return self.kind if self.kind == "any" else f"{self.kind}={','.join(self.domains)}"


@dataclass
class SynthConfig:
    output: Path
    seed: int = DEFAULT_SEED
    policy: DomainPolicy = field(default_factory=DomainPolicy)
    jobs: int = 1
    batch_size: int = 64


@dataclass
class SynthSummary:
    sentences: int = 0
    synthesized: int = 0
    rejected: int = 0
    total_frames: int = 0
    sil_fallbacks: int = 0
    words_by_level: Counter = field(default_factory=Counter)
    sentences_by_domain: Counter = field(default_factory=Counter)
    rejects_by_reason: Counter = field(default_factory=Counter)

    def format(self) -> str:
        lines = [
            f"sentences\t{self.sentences}",
            f"synthesized\t{self.synthesized}",
            f"rejected\t{self.rejected}",
            f"total_frames\t{self.total_frames}",
            f"sil_fallbacks\t{self.sil_fallbacks}",
        ]
        for level in (Level.WORD, Level.PIECE, Level.GRAPHEME):
            lines.append(f"words.{level}\t{self.words_by_level[level]}")
        for dom in sorted(self.sentences_by_domain):
            lines.append(f"domain.{dom}\t{self.sentences_by_domain[dom]}")
        for reason in sorted(self.rejects_by_reason):
            lines.append(f"reject.{reason}\t{self.rejects_by_reason[reason]}")
        return "\n".join(lines) + "\n"


def sentence_id(index: int) -> str:
    return f"synth{index:08d}"


def synthesize_one(index: int, raw: str, libs: LibrarySet, store: FeatureStore, seed: int, policy: DomainPolicy):
    """Returns ``("ok", matrix, entry, resolution)`` or ``("reject", reason, detail)``."""
    text = normalize_text(raw)
    if not text:
        return ("reject", "EmptySentence", "no words after normalization")
    try:
        plan = plan_units(text, libs, sentence_id(index))
        resolved = sample_instances(plan, libs, policy.domain_for(index), sentence_rng(seed, index))
        matrix, entry = splice(resolved, store)
    except SegspliceError as e:
        return ("reject", type(e).__name__, str(e).replace("\t", " ").replace("\n", " "))
    return ("ok", matrix, entry, plan.resolution)


_worker_state: dict = {}


def _init_worker(libs, store, seed, policy):
    _worker_state.update(libs=libs, store=store, seed=seed, policy=policy)


def _run_batch(batch):
    st = _worker_state
    return [synthesize_one(i, raw, st["libs"], st["store"], st["seed"], st["policy"]) for i, raw in batch]


def _batches(sentences: Iterable[str], size: int):
    batch = []
    for i, raw in enumerate(sentences):
        batch.append((i, raw))
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def _results(sentences, libs, store, config):
    """Per-sentence results in input order; at most 2*jobs batches in flight."""
    if config.jobs <= 1:
        for batch in _batches(sentences, config.batch_size):
            for i, raw in batch:
                yield synthesize_one(i, raw, libs, store, config.seed, config.policy)
        return
    with ProcessPoolExecutor(
        config.jobs, initializer=_init_worker, initargs=(libs, store, config.seed, config.policy)
    ) as pool:
        pending = deque()
        for batch in _batches(sentences, config.batch_size):
            pending.append(pool.submit(_run_batch, batch))
            if len(pending) >= 2 * config.jobs:
                yield from pending.popleft().result()
        while pending:
            yield from pending.popleft().result()


def output_paths(outdir) -> dict[str, Path]:
    outdir = Path(outdir)
    return {
        "features": outdir / "feats",
        "manifest": outdir / "manifest.jsonl",
        "rejects": outdir / "rejects.tsv",
        "summary": outdir / "summary.txt",
    }


def synthesize_corpus(sentences: Iterable[str], libs: LibrarySet, store: FeatureStore, config: SynthConfig) -> SynthSummary:
    """Synthesize every sentence into ``config.output``.

    Writes a feature store (``feats.idx``/``feats.bin``), a JSON-lines
    manifest, a rejects TSV and a summary.  Output is a pure function of
    the inputs and config; ``jobs`` does not change a single byte.
    """
    paths = output_paths(config.output)
    summary = SynthSummary()
    try:
        Path(config.output).mkdir(parents=True, exist_ok=True)
        with FeatureStoreWriter(paths["features"], dim=store.dim) as feats, \
                open(paths["manifest"], "w", encoding="utf-8") as manifest, \
                open(paths["rejects"], "w", encoding="utf-8") as rejects:
            for index, result in enumerate(_results(sentences, libs, store, config)):
                summary.sentences += 1
                if result[0] == "reject":
                    _, reason, detail = result
                    rejects.write(f"{index + 1}\t{reason}\t{detail}\n")
                    summary.rejected += 1
                    summary.rejects_by_reason[reason] += 1
                    continue
                _, matrix, entry, resolution = result
                feats.add(entry.sentence_id, matrix)
                manifest.write(entry.to_json() + "\n")
                summary.synthesized += 1
                summary.total_frames += entry.total_frames
                summary.sentences_by_domain[entry.domain] += 1
                summary.words_by_level.update(resolution)
                if FLAG_SIL_FALLBACK in entry.flags:
                    summary.sil_fallbacks += 1
        paths["summary"].write_text(summary.format(), encoding="utf-8")
    except OSError as e:
        raise IoFailure(str(e)) from e
    return summary


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, encoding="utf-8") as f:
        return [ManifestEntry.from_json(line) for line in f if line.strip()]
