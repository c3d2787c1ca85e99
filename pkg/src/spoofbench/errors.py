"""Exception types shared across the toolkit."""


class SpoofbenchError(Exception):
    """Base class for toolkit-specific failures."""


class ConfigError(SpoofbenchError):
    """A configuration file is missing, malformed, or inconsistent."""


class DependencyError(SpoofbenchError):
    """A pipeline stage was run before one of its upstream stages."""

    def __init__(self, stage: str, missing: str):
        super().__init__(f"stage '{stage}' requires artifacts from stage '{missing}'")
        self.stage = stage
        self.missing = missing


class TrainingDivergedError(SpoofbenchError):
    """A training loop produced NaN/inf losses or gradients."""


class NotFoundError(SpoofbenchError, KeyError):
    """A named resource (condition tag, manifest entry) does not exist."""
