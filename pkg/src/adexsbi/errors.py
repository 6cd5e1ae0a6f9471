"""Exception hierarchy shared across the package."""


class AdexSbiError(Exception):
    """Base class for all package errors."""


class ConfigError(AdexSbiError, ValueError):
    """Invalid or inconsistent configuration."""


class RangeError(AdexSbiError, ValueError):
    """A digital parameter code lies outside 0..1022."""


class ShapeError(AdexSbiError, ValueError):
    """Array shapes do not match the operation's contract."""


class IntegrationError(AdexSbiError, RuntimeError):
    """The neuron integrator produced a non-finite state."""

    def __init__(self, step: int, message: str = "non-finite state"):
        super().__init__(f"{message} at integration step {step}")
        self.step = step


class SimulationError(AdexSbiError, RuntimeError):
    """A simulation inside a batch failed; ``index`` names the row."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"simulation of row {index} failed: {cause}")
        self.index = index
        self.cause = cause


class FormatError(AdexSbiError, IOError):
    """Base class for binary file format errors."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ChecksumMismatchError(FormatError):
    pass


class NumericError(AdexSbiError, FloatingPointError):
    """Non-finite values appeared during a numerical computation."""


class TrainingError(AdexSbiError, RuntimeError):
    """Training diverged (non-finite loss)."""


class LeakageError(AdexSbiError, RuntimeError):
    """Posterior mass escaped the prior box; rejection sampling stalled."""


class StageError(AdexSbiError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
