"""Exception hierarchy; the CLI maps these onto exit codes."""


class MGTAError(Exception):
    """Base class for all library errors."""


class ConfigError(MGTAError, ValueError):
    """Invalid configuration, shape contract or parameter layout."""


class DataError(MGTAError):
    """Malformed or missing input data (sequences, poses, checkpoints)."""


class NumericalError(MGTAError, ArithmeticError):
    """NaN/Inf produced during forward or training."""


class TrainingError(NumericalError):
    """Optimizer or loss failure during training."""
