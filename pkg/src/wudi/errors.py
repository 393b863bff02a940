"""Exception types shared across the package."""

from __future__ import annotations


class WudiError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(WudiError):
    """Operands have incompatible shapes."""

    def __init__(self, message: str, shapes: tuple = ()):
        super().__init__(message)
        self.shapes = shapes


class SingularMatrixError(WudiError):
    """A symmetric factorization hit a non-positive pivot.

    ``pivot`` is the 0-based index of the failing pivot; the caller decides
    whether to retry with regularization.
    """

    def __init__(self, message: str, pivot: int):
        super().__init__(message)
        self.pivot = pivot


class DegenerateVectorError(WudiError):
    """A vector required to have positive norm was zero."""


class DegenerateSampleError(DegenerateVectorError):
    """A sample in a batch was degenerate; ``index`` locates it."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class DegenerateSubsetError(WudiError):
    """A row-subset selection came out empty."""


class DivergenceError(WudiError):
    """An iterative solve produced a non-finite or non-decreasing loss."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class CheckpointParseError(WudiError):
    """Checkpoint file header is malformed; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.offset = offset


class CheckpointIntegrityError(WudiError):
    """Checkpoint contents are inconsistent; ``tensor`` names the culprit."""

    def __init__(self, message: str, tensor: str | None = None):
        super().__init__(message)
        self.tensor = tensor


class NonFiniteTensorError(WudiError):
    """Refused to serialize a tensor containing NaN/Inf (or one that would
    overflow its storage dtype); ``tensor`` and flat ``index`` locate it."""

    def __init__(self, message: str, tensor: str, index: int):
        super().__init__(message)
        self.tensor = tensor
        self.index = index


class ManifestError(WudiError):
    """Merge manifest is missing or invalid."""


class MergeLayerError(WudiError):
    """A per-layer solve failed; wraps the original error with the layer name."""

    def __init__(self, layer: str, cause: Exception):
        super().__init__(f"layer {layer!r}: {cause}")
        self.layer = layer
        self.cause = cause
