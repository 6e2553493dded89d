"""Exception hierarchy shared by every flowsynth module."""


class FlowSynthError(Exception):
    """Base class for all toolkit errors."""


class ConfigInvalid(FlowSynthError, ValueError):
    pass


class DimensionMismatch(FlowSynthError, ValueError):
    pass


class CountMismatch(FlowSynthError, ValueError):
    pass


# datagen
class BackendUnavailable(FlowSynthError):
    """No external generator (or recorded fixture) could be located."""


class BackendFailure(FlowSynthError):
    """The external generator ran but did not produce usable frames."""

    def __init__(self, message, diagnostics=""):
        super().__init__(message)
        self.diagnostics = diagnostics


class SingularTransform(FlowSynthError, ValueError):
    pass


class EmptyMask(FlowSynthError, ValueError):
    pass


class ObjectOutOfFrame(FlowSynthError, ValueError):
    pass


# flow
class EstimatorUnavailable(FlowSynthError):
    pass


class FlowFormatError(FlowSynthError, ValueError):
    pass


class BadMagic(FlowFormatError):
    pass


class TruncatedFile(FlowFormatError):
    pass


class DimensionOverflow(FlowFormatError):
    pass


# triplets
class MissingMask(FlowSynthError, FileNotFoundError):
    pass


class SingleFrameVideo(FlowSynthError, ValueError):
    pass


class CorruptManifest(FlowSynthError, ValueError):
    pass


class EmptyDataset(FlowSynthError, ValueError):
    pass


# metrics / model / training
class PredOutOfRange(FlowSynthError, ValueError):
    pass


class MissingPrediction(FlowSynthError, FileNotFoundError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(self.missing[:10])
        more = f" (+{len(self.missing) - 10} more)" if len(self.missing) > 10 else ""
        super().__init__(f"missing predictions for {len(self.missing)} frame(s): {shown}{more}")


class NonFiniteLoss(FlowSynthError, FloatingPointError):
    pass


class CheckpointError(FlowSynthError, ValueError):
    pass
