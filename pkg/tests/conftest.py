from collections import Counter

import pytest

from corpus_gen import make_corpus, write_corpus
from segsplice.bpe import train_bpe
from segsplice.corpus_io import open_feature_store
from segsplice.seglib import build_libraries, save_libraries

_acceptance = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")


@pytest.fixture(scope="session")
def corpus():
    return make_corpus()


@pytest.fixture(scope="session")
def corpus_bpe(corpus):
    counts = Counter(w.text for a in corpus.alignments for w in a.words)
    return train_bpe(counts, 120)


@pytest.fixture(scope="session")
def corpus_files(corpus, corpus_bpe, tmp_path_factory):
    """Alignment file, feature store, BPE model and built libraries on disk."""
    d = tmp_path_factory.mktemp("corpus")
    align, feats = write_corpus(corpus, d)
    libs = build_libraries(corpus.alignments, corpus_bpe, seed=17)
    save_libraries(libs, d / "libs")
    return {"dir": d, "align": align, "feats": feats, "libs": d / "libs", "bpe": d / "libs" / "bpe.model"}


@pytest.fixture(scope="session")
def corpus_libs(corpus, corpus_bpe):
    return build_libraries(corpus.alignments, corpus_bpe, seed=17)


@pytest.fixture(scope="session")
def corpus_store(corpus_files):
    return open_feature_store(corpus_files["feats"])
