"""Exception hierarchy shared by every module.

The CLI maps ``FormatError`` (and argparse usage problems) to exit code 2 and
every other ``FocusError`` to exit code 1.
"""


class FocusError(Exception):
    """Base class for domain errors raised by the pipeline."""


class BehindCameraError(FocusError):
    pass


class InsufficientViewsError(FocusError):
    pass


class DegenerateConfigurationError(FocusError):
    pass


class OutOfRangeError(FocusError):
    pass


class InvalidSpecError(FocusError):
    pass


class EmptyMaskError(FocusError):
    pass


class EmptyInputError(FocusError):
    pass


class EmptyCloudError(FocusError):
    pass


class EmptyBatchError(FocusError):
    pass


class EmptyMeshError(FocusError):
    pass


class DegenerateMeshError(FocusError):
    pass


class InvalidJacobianError(FocusError):
    pass


class InvalidRequestError(FocusError):
    pass


class DivergenceError(FocusError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class FormatError(FocusError):
    """Malformed file content (raster, PLY, or manifest)."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class UnknownVersionError(FormatError):
    pass


class SchemaError(FormatError):
    pass
