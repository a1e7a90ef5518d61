"""Exception types shared across the package."""


class FieldRegError(Exception):
    """Base class for package errors."""


class DimensionMismatch(FieldRegError, ValueError):
    """Grid shapes or channel counts are incompatible."""


class FieldStateError(FieldRegError, RuntimeError):
    """A deformation field is used in the wrong normalization state."""


class IngestError(FieldRegError, RuntimeError):
    """Dataset loading or validation failed; message names the sample."""


class TrainingDiverged(FieldRegError, RuntimeError):
    """Loss became non-finite; a diagnostic snapshot was written."""


class StopSampling(Exception):
    """Raised from a trajectory callback to stop sampling and accept the
    current denoised field. Control flow, not an error."""
