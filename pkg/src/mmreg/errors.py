"""Exception hierarchy shared by the whole package."""

from __future__ import annotations


class MmregError(Exception):
    """Base class for every error raised deliberately by mmreg."""


class ValidationError(MmregError, ValueError):
    """Invalid user input: bad values, malformed files, inconsistent options."""


class InvalidVolumeError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class FormatError(ValidationError):
    """Malformed or unsupported file content.

    ``field`` names the header field, column or key that failed, ``line`` is
    set for line-oriented formats.
    """

    def __init__(self, message: str, *, path=None, field: str | None = None,
                 line: int | None = None):
        self.path = None if path is None else str(path)
        self.field = field
        self.line = line
        parts = []
        if self.path is not None:
            parts.append(self.path)
        if line is not None:
            parts.append(f"line {line}")
        prefix = ": ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class UnsupportedFormatError(FormatError):
    pass


class UnsupportedDatatypeError(FormatError):
    def __init__(self, code: int, **kwargs):
        self.code = code
        kwargs.setdefault("field", "datatype")
        super().__init__(f"unsupported datatype code {code} (only 16, float32)", **kwargs)


class TruncatedDataError(FormatError):
    pass


class NonFiniteDataError(FormatError):
    pass


class OptimizationError(MmregError, RuntimeError):
    """Optimization diverged.

    Carries the iteration at which it happened and the last finite iterate
    (``fields`` is a ``(u_fwd, u_bwd)`` pair, or ``None`` if none was finite).
    """

    def __init__(self, message: str, iteration: int, fields=None, level: int | None = None):
        self.iteration = iteration
        self.fields = fields
        self.level = level
        where = f"iteration {iteration}" if level is None else f"level {level}, iteration {iteration}"
        super().__init__(f"{message} ({where})")
