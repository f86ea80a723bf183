"""Custom exceptions for the hyperpoint toolkit."""

from typing import Optional


class HyperPointError(Exception):
    """Base exception for hyperpoint."""
    pass


class ShapeError(HyperPointError):
    """Raised when tensor operands do not conform."""
    pass


class GradientError(HyperPointError):
    """Raised when gradient propagation or gradient checking fails."""
    def __init__(self, message: str, coordinate: Optional[tuple] = None):
        super().__init__(message)
        self.coordinate = coordinate


class GeometryError(HyperPointError):
    """Raised for invalid spatial input (empty sets, non-finite coordinates, bad counts)."""
    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class DataFormatError(HyperPointError):
    """Raised when a cloud, raster or spectral array cannot be ingested."""
    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.path = path
        self.line = line


class CheckpointError(HyperPointError):
    """Raised when a checkpoint container is corrupt or incompatible."""
    pass


class ConfigurationError(HyperPointError):
    """Raised when configuration is invalid."""
    pass


class EvaluationError(HyperPointError):
    """Raised when metrics cannot be computed."""
    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class TrainingError(HyperPointError):
    """Raised when training aborts (divergence, non-finite gradients)."""
    def __init__(self, message: str, epoch: Optional[int] = None, checkpoint: Optional[str] = None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint
