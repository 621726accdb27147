class FodSwinError(Exception):
    """Base class for toolkit errors."""


class NiftiFormatError(FodSwinError, ValueError):
    """Header is not a NIfTI-1 header (bad sizeof_hdr or magic)."""


class UnsupportedDatatypeError(FodSwinError, ValueError):
    """Datatype other than float32."""


class NiftiTruncatedError(FodSwinError, OSError):
    """Payload shorter than the header promises."""


class NumericalError(FodSwinError, ArithmeticError):
    """Ill-posed linear system (rank deficiency, singular matrix)."""


class ConfigError(FodSwinError, ValueError):
    pass


class SamplingError(FodSwinError, RuntimeError):
    """Rejection sampling ran out of attempts."""


class NonFiniteError(FodSwinError, FloatingPointError):
    pass


class EmptySelectionError(FodSwinError, ValueError):
    """No ACC value to summarise.

    `reason` is "no voxels" when the mask selects nothing and "all undefined"
    when every selected voxel has an undefined ACC.
    """

    def __init__(self, reason, message=None):
        self.reason = reason
        super().__init__(message or f"empty selection: {reason}")
