from __future__ import annotations


class PinferError(Exception):
    """Base class for every error raised on purpose by this package."""


class ContractViolation(PinferError, ValueError):
    pass


class TapeError(PinferError, RuntimeError):
    pass


class DegenerateGeometryError(PinferError, ValueError):
    pass


class DivergenceError(PinferError, FloatingPointError):
    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"rollout diverged at step {step}")


class CheckpointError(PinferError, ValueError):
    pass


class TrajectoryParseError(PinferError, ValueError):
    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"{message} (offset {offset})")


class BadMagicError(TrajectoryParseError):
    pass


class TruncatedPayloadError(TrajectoryParseError):
    pass


class VersionMismatchError(TrajectoryParseError):
    pass
