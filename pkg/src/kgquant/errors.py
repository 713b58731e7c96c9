"""Exception types shared across the package.

Every error raised on purpose derives from :class:`KgQuantError` so callers
(and the CLI) can distinguish domain failures from bugs.
"""


class KgQuantError(Exception):
    pass


class ShapeError(KgQuantError):
    """Array shapes are inconsistent with an operation's contract."""


class ParseError(KgQuantError):
    """A data file line could not be parsed; message carries the line number."""


class VocabularyError(KgQuantError):
    """An unknown entity or relation label under a frozen label map."""


class FormatError(KgQuantError):
    """A data file violates its format contract (counts, duplicates, dims)."""


class CoverageError(KgQuantError):
    """A required per-entity resource (text vector, code sequence) is missing."""


class TransportError(KgQuantError):
    """HTTP failure that persisted through the retry budget."""


class ProtocolError(KgQuantError):
    """A remote endpoint answered with a malformed or mismatched payload."""


class StateError(KgQuantError):
    """An object was used before required state was in place (e.g. gradients)."""


class DivergenceError(KgQuantError):
    """Training produced a non-finite loss; message carries epoch/batch."""


class CorruptionError(KgQuantError):
    """A checkpoint file is truncated or has a bad magic string."""


class CompatibilityError(KgQuantError):
    """A checkpoint was written by an incompatible format version."""


class ParameterError(KgQuantError):
    """A numeric argument is outside its valid range."""
