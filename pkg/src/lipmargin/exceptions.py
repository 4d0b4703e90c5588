class LipMarginError(Exception):
    """Base class for all errors raised by lipmargin."""


class InputError(LipMarginError, ValueError):
    """Malformed or out-of-range input (shapes, class indices, parameters)."""


class CorruptedModelError(LipMarginError):
    """Model parameters are non-finite or structurally inconsistent."""


class UsageError(LipMarginError, RuntimeError):
    """An operation was called out of order (e.g. backward without forward)."""


class NonFiniteGradientError(LipMarginError, FloatingPointError):
    """An optimizer step was asked to apply a NaN/Inf gradient."""


class RectificationError(LipMarginError, ValueError):
    """A loss that needs nonnegative logits received a negative one."""


class DegenerateInputError(LipMarginError, ValueError):
    """A loss denominator or similar quantity is nonpositive."""


class SerializationError(LipMarginError, ValueError):
    """A model or GMM file could not be decoded."""


class FormatVersionError(SerializationError):
    pass


class ConfigurationError(LipMarginError, ValueError):
    """Invalid experiment or detector configuration."""


class IdxFormatError(LipMarginError, ValueError):
    """Base class for IDX parsing failures."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class StageError(LipMarginError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
