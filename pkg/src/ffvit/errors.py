"""Exception hierarchy shared by every ffvit module."""


class FFViTError(Exception):
    """Base class for all library errors."""


class ShapeError(FFViTError, ValueError):
    """Operand shapes are incompatible."""


class RankError(ShapeError):
    """Tensor has too few dimensions for the requested op."""


class FixedSequenceLengthError(ShapeError):
    """The token feed-forward layer only accepts the token count it was built for.

    Its weight matrices are N x hidden and hidden x N, so any other sequence
    length is structurally invalid rather than merely unusual.
    """

    code = "FIXED_SEQUENCE_LENGTH"

    def __init__(self, expected: int, got: int):
        self.expected = expected
        self.got = got
        super().__init__(
            f"[{self.code}] token feed-forward built for N={expected} tokens, got N={got}"
        )


class ConfigError(FFViTError, ValueError):
    """Invalid configuration value."""


class FormatError(FFViTError):
    """A file does not follow the expected binary layout."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConsistencyError(FormatError):
    """Two files that must agree (e.g. images and labels) do not."""


class CorruptionError(FormatError):
    """A checkpoint is truncated or its contents contradict its header."""


class StateError(FFViTError, RuntimeError):
    """Optimizer or training state is missing something it needs."""


class NonFiniteLossError(FFViTError, FloatingPointError):
    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"loss became non-finite ({value}) at step {step}")


class ResourceError(FFViTError, MemoryError):
    """Allocation failed for a requested geometry."""
