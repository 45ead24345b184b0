"""Exception hierarchy shared across the package."""


class PuorlError(Exception):
    pass


class ShapeError(PuorlError, ValueError):
    pass


class TrainingDivergenceError(PuorlError, FloatingPointError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class ConfigError(PuorlError, ValueError):
    pass


class EnvStepError(PuorlError, RuntimeError):
    pass


class SplitError(PuorlError, ValueError):
    pass


class DataError(PuorlError, ValueError):
    pass


class FormatError(PuorlError, ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    def __init__(self, what, expected, found):
        super().__init__(f"{what} mismatch: expected {expected}, found {found}")
        self.expected = expected
        self.found = found


class BatchError(PuorlError, ValueError):
    pass


class DegenerateTrainingError(PuorlError, RuntimeError):
    pass


class EstimationError(PuorlError, RuntimeError):
    pass


class ModeError(PuorlError, ValueError):
    pass


class NoRunsFoundError(PuorlError, FileNotFoundError):
    pass


class MissingArtifactsError(PuorlError, FileNotFoundError):
    def __init__(self, missing):
        super().__init__("missing artifacts: " + ", ".join(missing))
        self.missing = list(missing)
