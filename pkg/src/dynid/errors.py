"""Exception hierarchy.

Every error carries an ``exit_code`` used by the CLI: 1 for bad inputs
(validation), 2 for failures while running.
"""

from __future__ import annotations


class DynIdError(Exception):
    exit_code = 2


class ValidationError(DynIdError):
    exit_code = 1


class ParseError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class NonFiniteError(ValidationError):
    pass


class FormatIOError(DynIdError, OSError):
    pass


class EmptySplitError(ValidationError):
    pass


class DegenerateFaceError(ValidationError):
    pass


class TooShortError(ValidationError):
    pass


class GraphError(DynIdError):
    pass


class ReceptiveFieldError(ValidationError):
    pass


class EmptyPullSetError(DynIdError):
    pass


class EmptyPushSetError(DynIdError):
    pass


class DegenerateError(DynIdError):
    pass


class InsufficientDataError(ValidationError):
    pass


class NonFiniteLossError(DynIdError):
    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class VersionError(ValidationError):
    pass


class ManifestMismatchError(ValidationError):
    pass


class NoScoreableIdentityError(ValidationError):
    pass


class MarginError(DynIdError):
    pass
