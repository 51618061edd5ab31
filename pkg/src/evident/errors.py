"""Exception hierarchy shared by every module."""

from __future__ import annotations


class EvidentError(Exception):
    pass


class BoundaryViolation(EvidentError):
    """An operation crossed the one-iteration/one-build boundary."""


class DuplicateEntryError(EvidentError):
    pass


class BudgetExhausted(EvidentError):
    pass


class PreconditionError(EvidentError):
    pass


class BrokenInputError(EvidentError):
    """Package inputs are missing or corrupt; the session is Broken/Unsolvable."""


class MissingRecipeError(BrokenInputError):
    pass


class BrokenRecipeError(BrokenInputError):
    pass


class BrokenArchiveError(BrokenInputError):
    pass


class RecipeStructureError(EvidentError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InspectionError(EvidentError):
    pass


class UnsupportedFormatError(EvidentError):
    pass


class MissingMemberError(EvidentError):
    pass


class RepackError(EvidentError):
    pass


class PathEscapeError(EvidentError):
    pass


class EncodingMismatchError(EvidentError):
    pass


class NotFoundError(EvidentError, FileNotFoundError):
    pass


class ScratchLeakError(EvidentError):
    """A build payload referenced the unpack scratch area."""


class TransportError(EvidentError):
    pass


class InvalidTokenError(EvidentError):
    pass


class DriverUnavailable(EvidentError):
    pass


class MalformedTurnError(EvidentError):
    pass


class ConfigError(EvidentError):
    pass
