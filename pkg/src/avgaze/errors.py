"""Exception types shared across the package."""


class AVGazeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(AVGazeError, ValueError):
    pass


class TooShortError(AVGazeError, ValueError):
    pass


class ConfigError(AVGazeError, ValueError):
    pass


class InsufficientDataError(AVGazeError, ValueError):
    pass


class DegenerateVectorError(AVGazeError, ValueError):
    pass


class ShapeError(AVGazeError, ValueError):
    pass


class AlignmentError(AVGazeError, ValueError):
    pass


class LookupFailure(AVGazeError, KeyError):
    pass


class ManifestError(AVGazeError):
    """Raised for unparseable manifests; ``problems`` holds (line, message) pairs."""

    def __init__(self, problems):
        self.problems = list(problems)
        lines = "; ".join(f"line {ln}: {msg}" for ln, msg in self.problems)
        super().__init__(f"manifest invalid: {lines}")


class NonFiniteLossError(AVGazeError, FloatingPointError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
