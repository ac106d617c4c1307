"""``segsplice`` command line front-end.

Exit codes: 0 success, 1 usage, 2 input/data error, 3 validation violation.
"""

from __future__ import annotations

import argparse
import sys
from collections import Counter
from pathlib import Path

from .bpe import BPE_MAGIC, load_bpe, save_bpe, train_bpe
from .corpus_io import ALIGN_MAGIC, FEAT_MAGIC, graphemes, iter_alignments, open_feature_store
from .errors import SegspliceError
from .seglib import (
    DEFAULT_CAPS,
    DEFAULT_SEED,
    LIB_MAGIC,
    DurationBounds,
    Level,
    build_libraries,
    dangling_refs,
    load_libraries,
    save_libraries,
)
from .stats import DEFAULT_BIN_WIDTH, candidate_duration_histogram, coverage, duration_histogram, unit_counts
from .synth import DomainPolicy, SynthConfig, normalize_text, output_paths, synthesize_corpus

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VIOLATION = 0, 1, 2, 3

FORMATS_HELP = f"""\
file formats:
  feature store   <base>.idx starting '{FEAT_MAGIC} dim=<D>', rows utt_id/frame_offset/num_frames;
                  <base>.bin little-endian float32 frames, row-major
  alignments      '{ALIGN_MAGIC}', rows utt_id/domain/word_index/symbol/start_frame/num_frames
                  (word_index '-' and symbol '<sil>' for silence)
  bpe model       '{BPE_MAGIC}', alphabet line, then one 'left<TAB>right' merge per line
  libraries       <dir>/{{word,piece,grapheme,silence}}.lib starting '{LIB_MAGIC} level=<L> cap=<C>',
                  rows unit/utt_id/start_frame/num_frames/grapheme_count/domain; plus <dir>/bpe.model
  manifest        JSON lines: id, text, domain, total_frames, spans[kind,unit,utt_id,start,length,word], flags
  rejects         line_number<TAB>reason<TAB>detail
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return value


def _positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return value


def _domain_policy(text):
    try:
        return DomainPolicy.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _read_lines(path):
    path = Path(path)
    if not path.is_file():
        raise SegspliceError(f"input file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def _bounds(args):
    if args.min_avg > args.max_avg:
        raise UsageError("--min-avg must not exceed --max-avg")
    return DurationBounds(args.min_avg, args.max_avg, args.sil_max)


def _emit(report, fmt):
    sys.stdout.write(report.as_kv() if fmt == "kv" else report.as_table())


def cmd_train_bpe(args):
    counts = Counter()
    for line in _read_lines(args.input):
        counts.update(normalize_text(line).split())
    model = train_bpe(counts, args.vocab_size)
    save_bpe(model, args.output)
    print(f"alphabet\t{len(model.alphabet)}\nmerges\t{len(model.merges)}\nvocab\t{len(model.vocab)}")
    return EXIT_OK


def cmd_build_lib(args):
    bounds = _bounds(args)
    store = open_feature_store(args.features)
    bpe = load_bpe(args.bpe)
    caps = {Level.WORD: args.word_cap, Level.PIECE: args.piece_cap,
            Level.GRAPHEME: args.grapheme_cap, Level.SILENCE: args.silence_cap}
    domains = [d for d in args.domains.split(",") if d] if args.domains else None
    # parse everything before sampling so a bad line aborts without partial output
    alignments = list(iter_alignments(args.alignments, store))
    libs = build_libraries(alignments, bpe, caps=caps, seed=args.seed, bounds=bounds,
                           domains=domains, jobs=args.jobs)
    save_libraries(libs, args.output)
    text = libs.summary.format()
    (Path(args.output) / "build_summary.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args):
    store = open_feature_store(args.features)
    libs = load_libraries(args.libs, store)
    sentences = _read_lines(args.sentences)
    config = SynthConfig(Path(args.output), seed=args.seed, policy=args.domain_policy,
                         jobs=args.jobs, batch_size=args.batch_size)
    summary = synthesize_corpus(sentences, libs, store, config)
    sys.stdout.write(summary.format())
    return EXIT_OK


def cmd_stats(args):
    if args.report == "coverage":
        libs = load_libraries(args.libs)
        _emit(coverage(_read_lines(args.sentences), libs), args.format)
    elif args.report == "durations":
        if args.pre_filter:
            if not args.alignments:
                raise UsageError("--pre-filter needs --alignments")
            bpe = load_bpe(args.bpe) if args.bpe else None
            if Level(args.level) is Level.PIECE and bpe is None:
                raise UsageError("piece histograms from alignments need --bpe")
            hist = candidate_duration_histogram(iter_alignments(args.alignments), bpe, args.level, args.bin)
        else:
            if not args.libs:
                raise UsageError("durations needs --libs (or --pre-filter --alignments)")
            hist = duration_histogram(load_libraries(args.libs), args.level, args.bin)
        _emit(hist, args.format)
    else:
        if args.libs:
            source, bpe = load_libraries(args.libs), None
        elif args.alignments:
            source = iter_alignments(args.alignments)
            bpe = load_bpe(args.bpe) if args.bpe else None
        else:
            raise UsageError("units needs --libs or --alignments")
        _emit(unit_counts(source, per_domain=args.per_domain, bpe=bpe), args.format)
    return EXIT_OK


def cmd_validate(args):
    bounds = _bounds(args)
    store = open_feature_store(args.features)
    problems = []
    if args.alignments:
        for utt in iter_alignments(args.alignments):
            if utt.utt_id not in store:
                problems.append(f"alignment: utterance {utt.utt_id!r} missing from feature store")
            elif utt.tokens[-1].end_frame > store.num_frames(utt.utt_id):
                problems.append(
                    f"alignment: {utt.utt_id} ends at frame {utt.tokens[-1].end_frame}, "
                    f"store has {store.num_frames(utt.utt_id)}"
                )
    if args.libs:
        libs = load_libraries(args.libs)
        problems += [f"library: {p}" for p in dangling_refs(libs, store)]
        for lib in libs:
            for unit, ref in lib.refs():
                if not bounds.accepts(ref):
                    problems.append(
                        f"library: {lib.level}:{unit}: {ref.utt_id}[{ref.start_frame}:{ref.end_frame}] "
                        f"violates duration bounds"
                    )
                if lib.level is not Level.SILENCE and ref.grapheme_count != len(graphemes(unit)):
                    problems.append(f"library: {lib.level}:{unit}: grapheme count {ref.grapheme_count} mismatch")
    for p in problems:
        print(p)
    if problems:
        print(f"{len(problems)} violation(s)", file=sys.stderr)
        return EXIT_VIOLATION
    print("ok")
    return EXIT_OK


def _add_bounds(p):
    p.add_argument("--min-avg", type=_positive_float, default=2, help="min avg frames per grapheme (default 2)")
    p.add_argument("--max-avg", type=_positive_float, default=30, help="max avg frames per grapheme (default 30)")
    p.add_argument("--sil-max", type=_positive_int, default=50, help="max silence frames (default 50)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="segsplice",
        description="Build speech-feature segment libraries and splice new utterances from text.",
        epilog=FORMATS_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-bpe", help="train a BPE model on transcripts", epilog=FORMATS_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--input", required=True, help="transcripts, one utterance per line")
    p.add_argument("--vocab-size", type=_positive_int, default=4000)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_train_bpe)

    p = sub.add_parser("build-lib", help="build word/piece/grapheme/silence libraries", epilog=FORMATS_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--alignments", required=True)
    p.add_argument("--features", required=True, help="feature store base path")
    p.add_argument("--bpe", required=True)
    p.add_argument("--output", required=True, help="library directory")
    p.add_argument("--domains", help="comma-separated domains to keep (default: all)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--word-cap", type=_positive_int, default=DEFAULT_CAPS[Level.WORD])
    p.add_argument("--piece-cap", type=_positive_int, default=DEFAULT_CAPS[Level.PIECE])
    p.add_argument("--grapheme-cap", type=_positive_int, default=DEFAULT_CAPS[Level.GRAPHEME])
    p.add_argument("--silence-cap", type=_positive_int, default=DEFAULT_CAPS[Level.SILENCE])
    _add_bounds(p)
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.set_defaults(func=cmd_build_lib)

    p = sub.add_parser("synth", help="synthesize feature utterances for text", epilog=FORMATS_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--libs", required=True)
    p.add_argument("--features", required=True, help="source feature store base path")
    p.add_argument("--sentences", required=True, help="UTF-8 text, one sentence per line")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--domain-policy", type=_domain_policy, default=DomainPolicy(),
                   help="any | fixed=D | round-robin=A,B,C (default any)")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="coverage, duration and unit-count reports")
    p.add_argument("report", choices=["coverage", "durations", "units"])
    p.add_argument("--libs")
    p.add_argument("--sentences")
    p.add_argument("--alignments")
    p.add_argument("--bpe")
    p.add_argument("--level", choices=["word", "piece"], default="word")
    p.add_argument("--bin", type=_positive_int, default=DEFAULT_BIN_WIDTH)
    p.add_argument("--pre-filter", action="store_true", help="histogram raw candidates from --alignments")
    p.add_argument("--per-domain", action="store_true")
    p.add_argument("--format", choices=["table", "kv"], default="table")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("validate", help="cross-check store, alignments and libraries")
    p.add_argument("--features", required=True)
    p.add_argument("--alignments")
    p.add_argument("--libs")
    _add_bounds(p)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "stats" and args.report == "coverage" and not (args.libs and args.sentences):
        parser.error("stats coverage needs --libs and --sentences")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"segsplice: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SegspliceError, ValueError) as e:
        print(f"segsplice: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
