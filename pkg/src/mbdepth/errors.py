"""Exception hierarchy shared by all mbdepth modules."""


class MbDepthError(Exception):
    pass


class InvalidPoseError(MbDepthError):
    pass


class BehindCameraError(MbDepthError):
    pass


class InvalidDepthError(MbDepthError):
    pass


class OutOfBoundsError(MbDepthError):
    pass


class PatchOutOfBoundsError(OutOfBoundsError):
    pass


class SamplingStarvationError(MbDepthError):
    pass


class DegenerateBundleError(MbDepthError):
    pass


class DegenerateEvalError(MbDepthError):
    pass


class EmptyMaskError(MbDepthError):
    pass


class TrainingDivergedError(MbDepthError):
    pass


class BundleFormatError(MbDepthError):
    pass


class VersionMismatchError(BundleFormatError):
    pass


class TruncatedBlobError(BundleFormatError):
    pass


class DimensionMismatchError(BundleFormatError):
    pass
