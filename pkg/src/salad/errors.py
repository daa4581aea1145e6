"""Exception types shared across the package.

The CLI maps these onto its stable exit codes: any :class:`SaladError`
is a validation problem (exit 3), plain ``OSError`` is an I/O problem
(exit 2), and failed verification checks exit 4 without raising.
"""


class SaladError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SaladError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateRowError(SaladError, ValueError):
    """A mask row excludes every key; the mask plan is invalid."""


class BlockCountError(SaladError, ValueError):
    """Top-k selection asked for more key blocks than exist.

    Callers may catch this and clamp k to the block count (which makes
    the mask all-true) or surface it as a configuration error.
    """


class ConfigError(SaladError, ValueError):
    """A config document, plan, or parameter bundle failed validation."""


class DataError(SaladError, ValueError):
    """Analysis input records are missing or malformed."""


class StateError(SaladError, RuntimeError):
    """An operation needs state (maps, tapes) that was not captured."""
