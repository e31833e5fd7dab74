"""
Exceptions raised across the training framework.
"""

from __future__ import annotations

from typing import Any, Sequence


class NcereError(Exception):
    """
    Base class for all errors raised by the framework.
    """


class DimensionError(NcereError, ValueError):
    def __init__(self, message: str, *shapes: Sequence[int]) -> None:
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = [tuple(s) for s in shapes]


class DegenerateVectorError(NcereError, ValueError):
    """
    A vector with (near) zero norm reached a normalisation. Upstream this
    usually means the representation collapsed.
    """


class ContractError(NcereError, ValueError):
    pass


class EmptyInputError(NcereError, ValueError):
    pass


class EmptyPairingError(NcereError, ValueError):
    pass


class ParseError(NcereError, ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LabelError(NcereError, ValueError):
    def __init__(self, offenders: Sequence[tuple[int, str]]) -> None:
        listing = ", ".join(f"line {line} ({name!r})" for line, name in offenders)
        super().__init__(f"unknown predicate labels: {listing}")
        self.offenders = list(offenders)


class CheckpointError(NcereError):
    pass


class CollapseError(NcereError):
    """
    Training aborted because representations degenerated. ``snapshot`` holds
    the diagnostics taken when the abort happened, if any could be computed;
    ``diagnostics_path`` the file they were written to.
    """

    def __init__(self, message: str, snapshot: Any = None) -> None:
        super().__init__(message)
        self.snapshot = snapshot
        self.diagnostics_path: Any = None


class ConfigError(NcereError, ValueError):
    pass


class ReportError(NcereError, OSError):
    def __init__(self, message: str, path: Any) -> None:
        super().__init__(f"{message}: {path}")
        self.path = path
