"""Exception hierarchy shared across the package."""

from __future__ import annotations


class StablewalkError(Exception):
    """Base class for all package errors."""


class InvalidStateError(StablewalkError, ValueError):
    """Raised when a state or input contains non-finite values."""


class DomainError(StablewalkError, ValueError):
    """Raised when an argument lies outside the operation's domain."""


class ConfigurationError(StablewalkError, ValueError):
    """Raised for unknown keys, bad dimensions or out-of-range settings."""


class TerrainError(StablewalkError):
    """Raised when no valid spawn location exists on a terrain."""


class SimulationDivergedError(StablewalkError):
    """Raised when the simulator produces non-finite state."""


class RolloutBufferError(StablewalkError, ValueError):
    """Raised when rollout sequences are misaligned."""


class TrainingDivergedError(StablewalkError):
    """Raised when a loss becomes non-finite during an update."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class CheckpointError(StablewalkError):
    """Base class for checkpoint loading failures."""


class CheckpointIntegrityError(CheckpointError):
    """Raised for truncated or corrupted checkpoint files."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointVersionError(CheckpointError):
    """Raised when the container version is not supported."""


class CheckpointShapeError(CheckpointError):
    """Raised when a stored tensor does not match the target network."""

    def __init__(self, message: str, tensor: str):
        super().__init__(message)
        self.tensor = tensor
