"""Exception hierarchy shared by every fedtwin module.

Each CLI-facing error class carries the process exit status it maps to.
"""

from __future__ import annotations


class FedTwinError(Exception):
    exit_code = 1


class ConfigError(FedTwinError, ValueError):
    """Invalid configuration value (bad learning rate, unknown plan, ...)."""

    exit_code = 1


class ShapeError(FedTwinError, ValueError):
    exit_code = 1


class StateError(FedTwinError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""

    exit_code = 1


class DataError(FedTwinError, ValueError):
    """Malformed input data. ``line`` is the 1-based line number when known."""

    exit_code = 2

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RegistrationError(FedTwinError, ValueError):
    exit_code = 1


class ProtocolError(FedTwinError):
    exit_code = 3


class FormatError(ProtocolError, ValueError):
    """Malformed serialized buffer; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class RoundAborted(ProtocolError):
    """Every client skipped the round, so no aggregation happened."""


class CheckFailed(FedTwinError):
    exit_code = 4
