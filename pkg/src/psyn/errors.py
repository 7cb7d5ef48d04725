"""Exception types shared across the package."""


class PsynError(Exception):
    """Base class for all errors raised by psyn."""


class InputError(PsynError, ValueError):
    """An argument violates an operation's precondition (shape, range, ...)."""


class NumericError(PsynError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ConfigError(PsynError, ValueError):
    """Invalid experiment or strategy configuration.

    ``key`` names the offending configuration key when one is known.
    """

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        if key is not None and key not in message:
            message = f"{key}: {message}"
        super().__init__(message)


class ProtocolError(PsynError):
    """A simulated message does not fit the receiver's state."""


class ShardExhausted(PsynError):
    """A worker's data stream ran dry before a single minibatch was consumed."""

    def __init__(self, consumed: int = 0):
        self.consumed = consumed
        super().__init__(f"shard exhausted after {consumed} minibatches")
