"""Exception hierarchy shared by every component."""


class PetuumError(Exception):
    """Base class for all errors raised by petuum_lite."""


class UsageError(PetuumError, ValueError):
    """An API was called with arguments that violate its preconditions."""


class ContractViolation(PetuumError):
    """Two writers broke a consistency contract (e.g. conflicting overwrites)."""


class ServerShutdown(PetuumError):
    """A blocking call was interrupted because the server is shutting down."""


class ProtocolError(PetuumError):
    """Malformed frame on the wire.

    ``offset`` is the byte offset inside the frame where decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ConvergenceError(PetuumError):
    """An iterative diagnostic did not converge; ``last_iterate`` holds the final estimate."""

    def __init__(self, message: str, last_iterate):
        super().__init__(message)
        self.last_iterate = last_iterate


class RunAborted(PetuumError):
    """A run stopped abnormally: worker failure, missing partials, or user abort."""


class DataFormatError(UsageError):
    """An input file could not be parsed; ``line`` is 1-based."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
