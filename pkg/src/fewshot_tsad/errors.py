"""Exception hierarchy. CLI exit codes hang off these classes."""


class FewShotTSADError(Exception):
    exit_code = 1


class ConfigError(FewShotTSADError, ValueError):
    exit_code = 2


class DataError(FewShotTSADError, ValueError):
    exit_code = 3


class ShapeError(FewShotTSADError, ValueError):
    exit_code = 3


class NonFiniteError(FewShotTSADError, FloatingPointError):
    exit_code = 4


class DivergenceError(NonFiniteError):
    """Training produced a non-finite loss."""
