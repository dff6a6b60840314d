"""Typed errors shared across the toolkit."""


class TwnError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(TwnError):
    """Operands have incompatible shapes (no silent broadcasting)."""


class AllZeroWeights(TwnError):
    """Weight vector is entirely zero; no positive threshold exists."""


class DegenerateSupport(TwnError):
    """Threshold is at or above max |W|, leaving the support set empty."""


class InvalidCode(TwnError):
    """A packed 2-bit field holds the reserved 11 pattern."""


class TruncatedData(TwnError):
    """Buffer or file ends before the declared payload; message names the byte offset."""


class FormatError(TwnError):
    """Unrecognized magic, version, or structural violation in a container."""


class ConfigError(TwnError):
    """Bad network config line; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DatasetError(TwnError):
    """Dataset constraint violated (empty split, class too small, label range)."""


class NonFiniteLoss(TwnError):
    """Forward pass produced a NaN/Inf loss."""


class NonFiniteGradient(TwnError):
    """A gradient tensor contains NaN/Inf; message names the parameter."""


class TrainingDiverged(TwnError):
    """Training loss became non-finite; carries the last good checkpoint path."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
