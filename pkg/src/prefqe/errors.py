"""Exception types shared across the package."""


class PrefqeError(Exception):
    """Base class for all package errors."""


class DimensionError(PrefqeError, ValueError):
    """Array shapes disagree. ``step`` is the 1-based step at fault, if any."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SupportError(PrefqeError, ValueError):
    """A distribution puts mass where the reference distribution has none."""

    def __init__(self, message, atom=None):
        super().__init__(message)
        self.atom = atom


class SizeError(PrefqeError, ValueError):
    pass


class NonFiniteError(PrefqeError, ValueError):
    pass


class TrainingDivergence(PrefqeError, RuntimeError):
    """Raised when a training loss becomes NaN or infinite."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class StageError(PrefqeError, RuntimeError):
    """Wraps a failure inside the evaluation pipeline with stage and step."""

    def __init__(self, stage, step, cause):
        super().__init__(f"stage {stage!r} failed at step h={step}: {cause}")
        self.stage = stage
        self.step = step
        self.cause = cause


class ConfigError(PrefqeError, ValueError):
    """Invalid experiment configuration; ``line`` points into the config file."""

    def __init__(self, message, line=None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
