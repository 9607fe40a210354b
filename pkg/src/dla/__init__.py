"""Mask-free angiography by voxel-wise tissue classification, on synthetic phantoms."""

__version__ = "0.1.0"

from dla.errors import (  # noqa: E402
    ConfigError,
    DataError,
    DLAError,
    EmptyClassError,
    NumericalError,
)
from dla.estimator import VoxelClassifier  # noqa: E402
from dla.volume import ROI, Volume  # noqa: E402

__all__ = [
    "ROI",
    "ConfigError",
    "DLAError",
    "DataError",
    "EmptyClassError",
    "NumericalError",
    "Volume",
    "VoxelClassifier",
    "__version__",
]
