"""Speech-feature segment libraries and text-driven utterance splicing."""

from .bpe import BpeModel, load_bpe, save_bpe, tokenize, train_bpe
from .corpus_io import (
    AlignmentToken,
    FeatureStore,
    UtteranceAlignment,
    open_feature_store,
    parse_alignments,
    write_feature_store,
)
from .seglib import (
    DurationBounds,
    Level,
    LibrarySet,
    SegmentRef,
    UnitLibrary,
    build_libraries,
    extract_candidates,
    load_libraries,
    save_libraries,
)
from .stats import coverage, duration_histogram, unit_counts
from .synth import (
    DomainPolicy,
    ManifestEntry,
    SynthConfig,
    normalize_text,
    plan_units,
    sample_instances,
    splice,
    synthesize_corpus,
)

__version__ = "0.1.0"
