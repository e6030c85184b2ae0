"""Error types shared across the simulator, mapped to CLI exit codes."""

from __future__ import annotations


class FeddncError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(FeddncError):
    """Invalid configuration: bad parameter values, non-composing model shapes,
    partition schemes that cannot be satisfied."""


class InputError(FeddncError):
    """Runtime input violates an operation's contract (shape mismatch, bad index)."""


class FormatError(FeddncError):
    """A data or checkpoint file does not match its declared layout."""


class ProtocolError(FeddncError):
    """Federation invariant broken: mismatched update shapes or ranges."""


class NumericError(FeddncError):
    """Non-finite value produced during training; carries round/collaborator context."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def exit_code_for(exc: BaseException) -> int:
    """Exit code the CLI reports for an exception."""
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, FeddncError):
        return EXIT_CONFIG
    raise exc
