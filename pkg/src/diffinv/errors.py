"""Error taxonomy shared across pipeline stages.

Each category carries a stable process exit code so shell callers can tell
configuration mistakes apart from data, persistence, or numerical failures.
"""


class DiffInvError(Exception):
    """Base class for categorized pipeline errors."""

    category = "error"
    exit_code = 1


class ConfigError(DiffInvError):
    category = "config"
    exit_code = 2


class IngestionError(DiffInvError):
    category = "data"
    exit_code = 3


class SplitIntegrityError(DiffInvError):
    category = "split-integrity"
    exit_code = 4


class PersistenceError(DiffInvError):
    category = "persistence"
    exit_code = 5


class TrainingError(DiffInvError):
    category = "training"
    exit_code = 6


class NumericalError(DiffInvError):
    category = "numerical"
    exit_code = 7
