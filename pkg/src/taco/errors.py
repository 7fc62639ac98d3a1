"""Exception types shared across the package."""

from __future__ import annotations


class TacoError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(TacoError, ValueError):
    """An operation received tensors whose shapes it cannot combine."""


class ConfigError(TacoError, ValueError):
    """A configuration value is missing or invalid."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field {field!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class DataError(TacoError, ValueError):
    """Input data is malformed or incompatible with a fitted schema."""


class CapacityError(TacoError, MemoryError):
    """An allocation would exceed the configured memory budget."""

    def __init__(self, what: str, requested_bytes: int, limit_bytes: int | None):
        self.what = what
        self.requested_bytes = int(requested_bytes)
        self.limit_bytes = limit_bytes
        limit = "unlimited" if limit_bytes is None else f"{limit_bytes} B"
        super().__init__(f"{what}: needs {self.requested_bytes} B, budget {limit}")


class CheckpointError(TacoError):
    """A checkpoint or serialized context could not be read."""


class NotFittedError(TacoError, RuntimeError):
    """``predict`` was called before ``fit``."""


class TrainingError(TacoError, RuntimeError):
    """A training step produced a non-finite loss."""
