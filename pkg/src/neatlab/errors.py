"""Exception hierarchy shared across the package."""


class NeatLabError(Exception):
    pass


class ShapeError(NeatLabError, ValueError):
    pass


class NumericalError(NeatLabError, ArithmeticError):
    pass


class ContractError(NeatLabError, RuntimeError):
    pass


class ConfigError(NeatLabError, ValueError):
    pass


class ParseError(ConfigError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingError(NumericalError):
    """Raised when a training loop produces a non-finite loss or parameter."""

    def __init__(self, message, step):
        self.step = step
        super().__init__(f"step {step}: {message}")


class CheckpointError(NeatLabError, IOError):
    pass


class VersionError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class ConfigWarning(UserWarning):
    pass
