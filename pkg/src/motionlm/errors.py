"""Exception hierarchy. Each error carries a CLI exit-code category."""


class MotionLMError(Exception):
    exit_code = 1


class ConfigInvalid(MotionLMError):
    exit_code = 2


class FingerprintMismatch(ConfigInvalid):
    pass


class MissingDependencyCheckpoint(MotionLMError):
    exit_code = 3


class MissingCheckpoint(MissingDependencyCheckpoint):
    pass


class FormatError(MotionLMError):
    """Malformed on-disk artifact."""

    exit_code = 4


class CorruptFile(FormatError):
    pass


class VersionUnsupported(FormatError):
    pass


class NumericError(MotionLMError):
    exit_code = 5


class NonFiniteLoss(NumericError):
    pass


class MissingGrad(NumericError):
    pass


class DegenerateInput(NumericError):
    pass


class NotARotation(NumericError):
    pass


class DegenerateConfiguration(NumericError):
    pass


class ShapeMismatch(MotionLMError, ValueError):
    pass


class SkeletonMismatch(ShapeMismatch):
    pass


class LengthMismatch(ShapeMismatch):
    pass


class DimMismatch(ShapeMismatch):
    pass


class LengthNotDivisible(ShapeMismatch):
    pass


class TooShort(MotionLMError, ValueError):
    pass


class BadToken(MotionLMError, ValueError):
    pass


class BadParams(MotionLMError, ValueError):
    pass


class EmptyBatch(MotionLMError, ValueError):
    pass


class EmptyReference(MotionLMError, ValueError):
    pass


class EmptyOutputSegment(MotionLMError, ValueError):
    pass


class AlreadyExpanded(MotionLMError):
    pass


class ContextOverflow(MotionLMError):
    pass


class SequenceTooLong(ContextOverflow):
    pass


class SessionOverflow(ContextOverflow):
    pass
