"""Exception taxonomy shared across the pipeline.

Exit-code mapping used by the CLI: validation/config problems exit 1,
training failures exit 2, numerical failures exit 3.
"""


class ValidationError(ValueError):
    """Bad input data or arguments (shapes, ranges, unknown tokens)."""


class ConfigError(ValidationError):
    """Bad or inconsistent configuration, missing checkpoints, unknown keys."""


class PersistenceError(OSError):
    """Failed to read or write an artifact on disk."""


class TrainingFailure(RuntimeError):
    """A training stage finished below its required quality bar or diverged."""


class FrozenDriftError(TrainingFailure):
    """Parameters that must stay frozen changed during downstream training."""


class NumericalError(RuntimeError):
    """Non-finite values encountered mid-computation."""


EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_TRAINING = 2
EXIT_NUMERICAL = 3
