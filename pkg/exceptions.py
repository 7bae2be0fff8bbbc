#!/usr/bin/env python3
"""
Exception hierarchy for the reconstruction engine
"""

from typing import Optional


class ReconstructionError(Exception):
    """Base class for every error raised by the pipeline"""


class ConfigError(ReconstructionError):
    """Unknown key or malformed config file"""


class DegenerateFaceError(ReconstructionError):
    """A triangle with (near) zero area where a valid one is required"""

    def __init__(self, face: int, message: Optional[str] = None):
        self.face = face
        super().__init__(message or f"Degenerate (zero-area) face {face}")


class MeshFormatError(ReconstructionError):
    """Mesh file could not be read or fails validation"""


class BinaryFormatError(ReconstructionError):
    """Binary artifact is truncated, malformed or of an unknown version"""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class TrackFormatError(BinaryFormatError):
    """Track file could not be decoded"""


class CheckpointFormatError(BinaryFormatError):
    """Timeline checkpoint could not be decoded"""


class SequenceFormatError(ReconstructionError):
    """Frame directory is empty, unreadable or inconsistent"""


class ShapeMismatchError(ReconstructionError):
    """Two arrays that must agree in shape do not"""


class DivergenceError(ReconstructionError):
    """Loss became non-finite during optimization"""

    def __init__(self, message: str, step: int, checkpoint: Optional[str] = None):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(message)


class StageError(ReconstructionError):
    """A pipeline stage failed; partial artifacts are kept"""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"Stage '{stage}' failed: {cause}")


class InternalError(ReconstructionError):
    """An invariant the code guarantees was violated"""


class RunDirectoryLockedError(ReconstructionError):
    """Another process holds the run directory lock"""
