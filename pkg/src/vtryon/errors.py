"""Exception hierarchy. The CLI maps these onto exit codes."""


class ValidationError(ValueError):
    """Bad input: wrong shape, out-of-range value, unknown flag."""


class ConfigurationError(ValidationError):
    """Inconsistent model or run configuration."""


class DegenerateTimestepError(ValidationError):
    """Timestep where the signal-to-noise ratio is undefined."""


class StateError(RuntimeError):
    """Missing or unusable run state (checkpoint, weights, resume target)."""


class LoadError(StateError):
    """A file on disk is missing or corrupt."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{path}: {reason}")
