"""Exception hierarchy shared by every segsplice module."""


class SegspliceError(Exception):
    """Base class for all data/format errors raised by segsplice."""


# feature store
class MissingFile(SegspliceError):
    pass


class BadMagic(SegspliceError):
    pass


class DimMismatch(SegspliceError):
    pass


class DuplicateUttId(SegspliceError):
    pass


class IoFailure(SegspliceError):
    pass


# alignments
class MalformedLine(SegspliceError):
    pass


class OverlapError(SegspliceError):
    pass


class NonContiguousWord(SegspliceError):
    pass


class UnknownUtterance(SegspliceError):
    pass


# bpe
class EmptyCorpus(SegspliceError):
    pass


class TargetTooSmall(SegspliceError):
    pass


class UnknownGrapheme(SegspliceError):
    def __init__(self, symbols):
        self.symbols = sorted(set(symbols))
        super().__init__("symbols outside the BPE alphabet: " + " ".join(self.symbols))


class BadFormat(SegspliceError):
    pass


# libraries
class MissingBpe(SegspliceError):
    pass


class DanglingRef(SegspliceError):
    def __init__(self, offenders):
        self.offenders = list(offenders)
        shown = "; ".join(self.offenders[:10])
        more = f" (+{len(self.offenders) - 10} more)" if len(self.offenders) > 10 else ""
        super().__init__(f"{len(self.offenders)} dangling reference(s): {shown}{more}")


# synthesis
class UncoverableWord(SegspliceError):
    def __init__(self, word, missing):
        self.word = word
        self.missing = sorted(set(missing))
        super().__init__(f"{word!r}: no grapheme segments for {' '.join(self.missing)}")


class DomainExhausted(SegspliceError):
    def __init__(self, domain, units):
        self.domain = domain
        self.units = list(units)
        super().__init__(f"no instances in domain {domain!r} for: {' '.join(self.units)}")
