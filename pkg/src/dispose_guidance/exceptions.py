"""
Error types for the dispose-guidance toolkit.

Every error carries a human readable ``detail`` and the process ``exit_code``
the CLI reports for it: 2 for bad input, 1 for invariant or runtime failures.
"""

from typing import Any, Dict, Optional

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_INPUT = 2


class DisposeError(Exception):
    """Base class for all toolkit errors."""
    exit_code: int = EXIT_INVARIANT

    def __init__(self, detail: str = "Guidance toolkit error"):
        super().__init__(detail)
        self.detail = detail


class InputError(DisposeError):
    """Bad files, bad configuration or bad parameters supplied by the caller."""
    exit_code = EXIT_INPUT


class InputFileError(InputError):
    def __init__(self, path: Any, reason: str = "file not found"):
        super().__init__(f"{reason}: {path}")
        self.path = str(path)


class PoseFormatError(InputError):
    def __init__(self, detail: str = "Malformed pose file", field: Optional[str] = None):
        super().__init__(f"{detail} (field: {field})" if field else detail)
        self.field = field


class FlowFormatError(InputError):
    def __init__(self, detail: str = "Malformed .flo file"):
        super().__init__(detail)


class FeatureFormatError(InputError):
    def __init__(self, detail: str = "Malformed feature file"):
        super().__init__(detail)


class CheckpointFormatError(InputError):
    def __init__(self, detail: str = "Malformed checkpoint"):
        super().__init__(detail)


class ConfigError(InputError, ValueError):
    def __init__(self, detail: str = "Invalid configuration"):
        super().__init__(detail)


class ParameterError(InputError, ValueError):
    def __init__(self, detail: str = "Invalid parameter"):
        super().__init__(detail)


class FrameIndexError(DisposeError, IndexError):
    def __init__(self, frame: int, frames: int):
        super().__init__(f"frame {frame} out of range for a stack of {frames} frames")
        self.frame = frame
        self.frames = frames


class TimestepError(DisposeError, IndexError):
    def __init__(self, t: Any, steps: int):
        super().__init__(f"timestep {t} outside 1..{steps}")


class DimensionError(DisposeError, ValueError):
    def __init__(self, detail: str = "Image dimensions must be positive"):
        super().__init__(detail)


class ShapeError(DisposeError, ValueError):
    def __init__(self, detail: str = "Shape mismatch", level: Optional[str] = None):
        super().__init__(f"{detail} at level {level}" if level is not None else detail)
        self.level = level


class EmptyConstraintError(DisposeError, ValueError):
    def __init__(self, detail: str = "empty constraint set"):
        super().__init__(detail)


class DegenerateFeatureError(DisposeError, ValueError):
    def __init__(self, detail: str = "degenerate feature"):
        super().__init__(detail)


class TrainingDivergedError(DisposeError):
    def __init__(self, step: int, diagnostic: Dict[str, Any]):
        super().__init__(f"loss became NaN at step {step}: {diagnostic}")
        self.step = step
        self.diagnostic = diagnostic


class InvariantViolation(DisposeError):
    """Raised by invariant checks; carries the witness values that broke it."""

    def __init__(self, module: str, invariant: str, witness: Optional[Dict[str, Any]] = None):
        witness = witness or {}
        super().__init__(f"[{module}] {invariant} violated: {witness}")
        self.module = module
        self.invariant = invariant
        self.witness = witness


class TruncatedFileError(InputError, OSError):
    def __init__(self, path: Any, expected: int, actual: int):
        super().__init__(f"truncated payload in {path}: expected {expected} bytes, found {actual}")
        self.path = str(path)
