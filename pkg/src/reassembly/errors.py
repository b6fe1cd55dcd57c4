"""Exception taxonomy mapped onto CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


class DataError(ValueError):
    """Invalid or degenerate dataset content (exit code 3)."""


class CertificationError(RuntimeError):
    """Equivariance certification failed (exit code 4)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training (exit code 5)."""
