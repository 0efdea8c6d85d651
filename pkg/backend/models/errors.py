"""Exception hierarchy for cache, attention and harness failures."""


class CascadeError(ValueError):
    """Base class for every domain error raised by the backend."""


class InvalidEntryError(CascadeError):
    """Entry shape does not match the store it is pushed into."""


class EmptyStoreError(CascadeError):
    """Removal requested from a store that holds nothing."""


class ScoreAlignmentError(CascadeError):
    """Score update does not cover exactly the resident tokens."""


class UndefinedSparsityError(CascadeError):
    """Sparsity asked for a sequence shorter than the cache."""


class NumericError(CascadeError):
    """Non-finite values reached an attention computation."""


class UnsupportedDimensionError(CascadeError):
    """Rotary encoding needs an even head dimension."""


class OrderingError(CascadeError):
    """Chunk positions are not the continuation of the cached stream."""


class ConfigError(CascadeError):
    """Invalid configuration value or file."""


class IncompleteTraceError(CascadeError):
    """Trace does not cover the requested number of tokens."""
