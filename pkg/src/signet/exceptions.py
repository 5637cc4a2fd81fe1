"""Exception hierarchy shared across the package."""


class SignetError(Exception):
    """Base class for all package errors."""


class ShapeError(SignetError, ValueError):
    pass


class ContractError(SignetError, ValueError):
    """A call violated an operation's precondition (e.g. non-scalar loss)."""


class ConfigError(SignetError, ValueError):
    pass


class DegenerateInputError(SignetError, ValueError):
    """Input has no spread (zero power, constant channel, ...)."""


class StratificationError(SignetError, ValueError):
    pass


class TrainingDivergence(SignetError, FloatingPointError):
    """Raised when a loss or gradient becomes non-finite.

    ``checkpoint`` carries the last parameter snapshot that was still finite.
    """

    def __init__(self, message, checkpoint=None, history=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history


class ContainerError(SignetError, IOError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class ArchitectureMismatchError(ContainerError):
    pass
