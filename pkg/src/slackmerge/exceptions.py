"""Exception hierarchy.

The CLI maps :class:`ValidationError` to exit status 1 and
:class:`CheckpointFormatError` (plus ``OSError``) to exit status 2.
"""


class MergeError(Exception):
    """Base class for every error raised by slackmerge."""


class ValidationError(MergeError, ValueError):
    """Bad arguments, mismatched structures, or an invalid recipe."""


class CheckpointFormatError(MergeError, ValueError):
    """A checkpoint container could not be parsed."""


class FingerprintMismatchError(ValidationError):
    """A task vector is being applied to a base it was not computed from."""


class EvalHookError(MergeError):
    """The external evaluation command failed or produced an unusable score."""

    def __init__(self, message, assignment=None):
        super().__init__(message)
        self.assignment = assignment
