"""Exception hierarchy shared across the package."""


class NormshapeError(Exception):
    """Base class for all package errors."""


# --- volume / IO ---
class MalformedHeader(NormshapeError):
    pass


class SizeMismatch(NormshapeError):
    pass


class NonBinaryVoxel(NormshapeError):
    pass


class IoFailure(NormshapeError):
    pass


class InvalidSpacing(NormshapeError):
    pass


class EmptyMask(NormshapeError):
    pass


class DoesNotFit(NormshapeError):
    pass


class DimMismatch(NormshapeError):
    pass


class UniformMask(NormshapeError):
    pass


# --- synthesis ---
class DegenerateShape(NormshapeError):
    pass


class VolumeMatchFailed(NormshapeError):
    pass


class GenerationExhausted(NormshapeError):
    pass


# --- nn / training ---
class ShapeMismatch(NormshapeError):
    pass


class StepOverflow(NormshapeError):
    pass


class NonFiniteLoss(NormshapeError):
    pass


# --- detection / evaluation ---
class EmptyCohort(NormshapeError):
    pass


class LengthMismatch(NormshapeError):
    pass


class SingleClass(NormshapeError):
    pass


class RankDeficient(NormshapeError):
    pass


class InvalidK(NormshapeError):
    pass


class TooFewSamples(NormshapeError):
    pass


class ResampleExhausted(NormshapeError):
    pass


class EmptyGroup(NormshapeError):
    pass
