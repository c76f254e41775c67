# app/core/exceptions.py
"""Error types raised across the toolkit.

Every error exposes ``code`` (its class name) so the command line can print a
machine-readable line without knowing the concrete type.
"""


class StrfError(Exception):
    """Base class for all toolkit errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# --- scalespace ---
class NonPositiveVariance(StrfError, ValueError):
    pass


class BadRatio(StrfError, ValueError):
    pass


class DimensionMismatch(StrfError, ValueError):
    pass


class UninitializedState(StrfError, RuntimeError):
    pass


class EmptyGrid(StrfError, ValueError):
    pass


class NonPositiveScale(StrfError, ValueError):
    pass


class InsufficientHistory(StrfError, RuntimeError):
    pass


class EmptyInterior(StrfError, ValueError):
    """Border exclusion leaves no pixels to accumulate."""


# --- rfields ---
class UnknownFieldSet(StrfError, ValueError):
    pass


class MissingChannels(StrfError, ValueError):
    pass


# --- descriptor ---
class InsufficientSamples(StrfError, ValueError):
    pass


class DegenerateCovariance(StrfError, ValueError):
    pass


class NormalizedHistogramWrite(StrfError, RuntimeError):
    pass


class EmptyHistogram(StrfError, ValueError):
    pass


class IncompatibleHistograms(StrfError, ValueError):
    pass


# --- classify ---
class EmptyTrainingSet(StrfError, ValueError):
    pass


class SingleClassTraining(StrfError, ValueError):
    pass


class NonConvergence(StrfError, RuntimeError):
    pass


class SchemeMismatch(StrfError, ValueError):
    pass


# --- ingest ---
class UnsupportedFormat(StrfError, ValueError):
    pass


class CorruptHeader(StrfError, ValueError):
    pass


class DimensionChangeMidStream(StrfError, ValueError):
    pass


class DuplicatePath(StrfError, ValueError):
    pass


class MissingFile(StrfError, FileNotFoundError):
    pass


class EmptyClass(StrfError, ValueError):
    pass


class BadParams(StrfError, ValueError):
    pass


class NonIntegerTemporalFactor(StrfError, ValueError):
    pass


# --- storage ---
class CacheCorrupt(StrfError, ValueError):
    pass
