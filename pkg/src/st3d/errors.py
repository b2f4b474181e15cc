"""Exception hierarchy shared across the package.

The CLI maps :class:`UsageError` to exit code 1 and :class:`DataError`
(including its format/consistency subclasses) to exit code 2.
"""


class ST3DError(Exception):
    """Base class for all package errors."""


class UsageError(ST3DError, ValueError):
    """Caller passed arguments that violate an operation's contract."""


class DataError(ST3DError, ValueError):
    """Input data is malformed or inconsistent."""


class FormatError(DataError):
    """A file does not follow its on-disk format (bad magic, truncation...)."""


class ConsistencyError(DataError):
    """Files disagree with each other or with the manifest."""


class InvalidGeometryError(DataError):
    """Non-positive radius, coincident spot centers and similar defects."""


class DegenerateFeatureError(DataError):
    """A feature vector has zero norm where a direction is required."""


class TrainingDivergedError(ST3DError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step, terms):
        self.step = step
        self.terms = dict(terms)
        detail = ", ".join(f"{k}={v!r}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss at step {step} ({detail})")
