"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when inputs violate a structural contract (grid/rig/config mismatch)."""


class GenerationError(RuntimeError):
    """Raised when synthetic-world generation cannot proceed (e.g. path leaves terrain)."""


class DatasetError(RuntimeError):
    """Raised on malformed, missing, or corrupt dataset files."""


class TrainingError(RuntimeError):
    """Raised when training aborts (e.g. non-finite loss)."""
