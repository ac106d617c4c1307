import random

import numpy as np
import pytest

from segsplice.bpe import BpeModel
from segsplice.corpus_io import open_feature_store, write_feature_store
from segsplice.errors import DanglingRef, DomainExhausted, UncoverableWord
from segsplice.seglib import SIL_KEY, Level, LibrarySet, SegmentRef, UnitLibrary
from segsplice.synth import (
    DomainPolicy,
    ManifestEntry,
    SynthConfig,
    normalize_text,
    output_paths,
    plan_units,
    read_manifest,
    sample_instances,
    sentence_rng,
    splice,
    synthesize_corpus,
)

DIM = 4
# (utt, frames): A holds "che" in 31 frames, B "fa" in 20, S a 12-frame silence,
# T "tem"+"po" in 15+16, V a Video-domain copy of "che"
UTTS = {"A": 31, "B": 20, "S": 12, "T": 31, "V": 31, "W": 8}


@pytest.fixture
def store(tmp_path):
    entries, base = [], 0.0
    for utt, n in UTTS.items():
        m = (np.arange(n * DIM, dtype=np.float32).reshape(n, DIM) + base)
        entries.append((utt, m))
        base += 1000.0
    write_feature_store(entries, tmp_path / "src", dim=DIM)
    return open_feature_store(tmp_path / "src")


BPE = BpeModel(frozenset("chetmpofa"), [("t", "e"), ("te", "m"), ("p", "o")])


def make_libs(words=None, pieces=None, graphemes=None, silence=None):
    if words is None:
        words = {
            "che": [SegmentRef("A", 0, 31, 3, "Dictation"), SegmentRef("V", 0, 31, 3, "Video")],
            "fa": [SegmentRef("B", 0, 20, 2, "Dictation")],
            "tempo": [SegmentRef("T", 0, 31, 5, "Dictation")],
        }
    if pieces is None:
        pieces = {"tem": [SegmentRef("T", 0, 15, 3, "Dictation")], "po": [SegmentRef("T", 15, 16, 2, "Dictation")]}
    if graphemes is None:
        graphemes = {g: [SegmentRef("W", 0, 4, 1, "Dictation")] for g in "chetmpof"}
    if silence is None:
        silence = {SIL_KEY: [SegmentRef("S", 0, 12, 0, "Dictation")]}
    return LibrarySet(
        UnitLibrary(Level.WORD, 500, words),
        UnitLibrary(Level.PIECE, 500, pieces),
        UnitLibrary(Level.GRAPHEME, 100, graphemes),
        UnitLibrary(Level.SILENCE, 500, silence),
        BPE,
    )


@pytest.mark.parametrize("raw, expected", [
    ("Che tempo fa", "che tempo fa"),
    ("  ciao,  CIAO!! ", "ciao ciao"),
    ("", ""),
    ("Perché l'acqua? 3 volte\tsì", "perché l'acqua 3 volte sì"),
    ("Perché", "perché"),
    ("l’uomo", "l'uomo"),
    ("...", ""),
])
def test_normalize_text(raw, expected):
    assert normalize_text(raw) == expected


def test_plan_all_words():
    plan = plan_units("che tempo fa", make_libs())
    assert plan.resolution == [Level.WORD] * 3
    assert [(u.level, u.unit, u.word) for u in plan.units] == [
        (Level.WORD, "che", 0), (Level.WORD, "tempo", 1), (Level.WORD, "fa", 2)
    ]


def test_plan_piece_fallback():
    libs = make_libs(words={"che": [SegmentRef("A", 0, 31, 3, "Dictation")]})
    plan = plan_units("che tempo", libs)
    assert plan.resolution == [Level.WORD, Level.PIECE]
    assert [(u.level, u.unit, u.word) for u in plan.units][1:] == [(Level.PIECE, "tem", 1), (Level.PIECE, "po", 1)]


def test_plan_grapheme_fallback():
    libs = make_libs(words={}, pieces={"tem": [SegmentRef("T", 0, 15, 3, "Dictation")]})
    plan = plan_units("tempo", libs)
    assert plan.resolution == [Level.GRAPHEME]
    assert [u.unit for u in plan.units] == list("tempo")


def test_plan_oov_grapheme_goes_to_grapheme_level():
    libs = make_libs(words={})
    # "x" is outside the BPE alphabet, so pieces are skipped
    libs.graphemes.entries["x"] = [SegmentRef("W", 0, 4, 1, "Dictation")]
    assert plan_units("fox", libs).resolution == [Level.GRAPHEME]


def test_uncoverable_word_names_grapheme():
    libs = make_libs(words={}, graphemes={g: [SegmentRef("W", 0, 4, 1, "D")] for g in "tempo"})
    with pytest.raises(UncoverableWord) as e:
        plan_units("tempo fa", libs)
    assert e.value.word == "fa" and e.value.missing == ["a", "f"]


def test_empty_grapheme_library_fails_only_when_needed():
    libs = make_libs(graphemes={})
    assert plan_units("che fa", libs).resolution == [Level.WORD, Level.WORD]
    with pytest.raises(UncoverableWord):
        plan_units("che of", libs)


def test_sample_domain_constraint():
    libs = make_libs()
    plan = plan_units("che fa", libs)
    for seed in range(20):
        r = sample_instances(plan, libs, "Dictation", random.Random(seed))
        assert all(s.ref.domain == "Dictation" for s in r.spans)
    with pytest.raises(DomainExhausted) as e:
        sample_instances(plan, libs, "Video", random.Random(0))
    assert e.value.units == ["word:fa"]


def test_sample_singleton_and_silence_placement():
    libs = make_libs()
    plan = plan_units("fa fa", libs)
    r = sample_instances(plan, libs, None, random.Random(1))
    assert [s.kind for s in r.spans] == ["UNIT", "SIL", "UNIT"]
    assert r.spans[0].ref == r.spans[2].ref == SegmentRef("B", 0, 20, 2, "Dictation")


def test_sample_deterministic():
    libs = make_libs()
    plan = plan_units("che che che fa che", libs)
    a = sample_instances(plan, libs, None, sentence_rng(17, 4))
    b = sample_instances(plan, libs, None, sentence_rng(17, 4))
    assert a.spans == b.spans
    picks = {s.ref.utt_id for i in range(50) for s in sample_instances(plan, libs, None, sentence_rng(i, 0)).spans}
    assert {"A", "V"} <= picks


def test_splice_single_word(store):
    libs = make_libs()
    m, entry = splice(sample_instances(plan_units("fa", libs), libs, None, random.Random(0)), store)
    assert m.shape == (20, DIM)
    assert m.tobytes() == store.slice("B", 0, 20).tobytes()
    assert entry.total_frames == 20


def test_splice_two_words_with_silence(store):
    libs = make_libs()
    m, entry = splice(sample_instances(plan_units("che fa", libs), libs, "Dictation", random.Random(0)), store)
    # 31 + 12 + 20
    assert m.shape[0] == 63
    assert [s.length for s in entry.spans] == [31, 12, 20]
    assert [s.kind for s in entry.spans] == ["UNIT", "SIL", "UNIT"]
    np.testing.assert_array_equal(m[31:43], store.slice("S", 0, 12))


def test_splice_pieces_no_inner_silence(store):
    libs = make_libs(words={})
    m, entry = splice(sample_instances(plan_units("tempo", libs), libs, None, random.Random(0)), store)
    assert m.shape[0] == 31
    assert [(s.kind, s.unit, s.length) for s in entry.spans] == [("UNIT", "tem", 15), ("UNIT", "po", 16)]
    assert entry.spelled_text() == "tempo"


def test_splice_dangling(store):
    libs = make_libs(words={"fa": [SegmentRef("B", 10, 20, 2, "Dictation")]})
    with pytest.raises(DanglingRef):
        splice(sample_instances(plan_units("fa", libs), libs, None, random.Random(0)), store)


def test_empty_silence_fallback(store):
    libs = make_libs(silence={})
    m, entry = splice(sample_instances(plan_units("fa fa", libs), libs, None, random.Random(0)), store)
    assert m.shape[0] == 50
    assert not m[20:30].any()
    assert entry.flags == ["sil_fallback"]
    assert entry.spans[1].utt_id is None


def test_manifest_json_roundtrip(store):
    libs = make_libs()
    _, entry = splice(sample_instances(plan_units("che tempo fa", libs), libs, None, random.Random(0)), store)
    assert ManifestEntry.from_json(entry.to_json()) == entry
    assert entry.spelled_text() == "che tempo fa"
    assert entry.total_frames == sum(s.length for s in entry.spans)


def test_domain_policy_parse():
    assert DomainPolicy.parse("any") == DomainPolicy()
    assert DomainPolicy.parse("fixed=Dictation").domain_for(7) == "Dictation"
    rr = DomainPolicy.parse("round-robin=A,B,C")
    assert [rr.domain_for(i) for i in range(5)] == ["A", "B", "C", "A", "B"]
    assert str(rr) == "round-robin=A,B,C"
    for bad in ["fixed", "fixed=A,B", "round-robin=", "sometimes"]:
        with pytest.raises(ValueError):
            DomainPolicy.parse(bad)


def _run(libs, store, sentences, out, **kw):
    summary = synthesize_corpus(sentences, libs, store, SynthConfig(out, **kw))
    paths = output_paths(out)
    return summary, {k: p.read_bytes() for k, p in paths.items() if p.exists()} | {
        "bin": (out / "feats.bin").read_bytes(), "idx": (out / "feats.idx").read_bytes()
    }


def test_synthesize_empty(store, tmp_path):
    summary, files = _run(make_libs(), store, [], tmp_path / "o")
    assert summary.sentences == summary.synthesized == summary.total_frames == 0
    assert files["manifest"] == b"" and files["rejects"] == b"" and files["bin"] == b""
    assert len(open_feature_store(tmp_path / "o" / "feats")) == 0


def test_synthesize_round_robin_and_rejects(store, tmp_path):
    libs = make_libs()
    libs.words.entries["fa"].append(SegmentRef("B", 0, 20, 2, "Video"))
    libs.words.entries["tempo"].append(SegmentRef("T", 0, 31, 5, "Video"))
    libs.silence.entries[SIL_KEY].append(SegmentRef("S", 0, 12, 0, "Video"))
    sents = ["che fa", "Tempo!", "che tempo fa", "fa", "che", "fa che", "tempo", "che fa", "fa fa"]
    policy = DomainPolicy.parse("round-robin=Dictation,Video,Dictation")
    summary, _ = _run(libs, store, sents + ["zzz", "   "], tmp_path / "o", policy=policy)
    assert summary.sentences_by_domain == {"Dictation": 6, "Video": 3}
    assert summary.rejected == 2
    rejects = (tmp_path / "o" / "rejects.tsv").read_text().splitlines()
    assert rejects[0].split("\t")[:2] == ["10", "UncoverableWord"]
    assert rejects[1].split("\t")[:2] == ["11", "EmptySentence"]
    entries = read_manifest(tmp_path / "o" / "manifest.jsonl")
    assert [e.text for e in entries] == [normalize_text(s) for s in sents]
    feats = open_feature_store(tmp_path / "o" / "feats")
    for e in entries:
        assert feats.num_frames(e.sentence_id) == e.total_frames
    summary_txt = (tmp_path / "o" / "summary.txt").read_text()
    assert "rejected\t2" in summary_txt


def test_synthesize_deterministic_and_parallel(corpus, corpus_libs, corpus_store, tmp_path):
    from corpus_gen import random_sentences

    sents = random_sentences(np.random.default_rng(3), corpus.vocab, 60, oov_rate=0.2)
    _, a = _run(corpus_libs, corpus_store, sents, tmp_path / "a", seed=17)
    _, b = _run(corpus_libs, corpus_store, sents, tmp_path / "b", seed=17)
    _, c = _run(corpus_libs, corpus_store, sents, tmp_path / "c", seed=17, jobs=2, batch_size=7)
    _, d = _run(corpus_libs, corpus_store, sents, tmp_path / "d", seed=18)
    assert a == b == c
    assert a["bin"] != d["bin"]
