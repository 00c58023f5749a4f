"""Empirical fixation densities from eye-tracking data.

Adaptive-bandwidth kernel density estimation embedded in a mixture with
center bias, uniform and saliency components, fitted per image by
leave-one-subject-out cross-validation.
"""

from fixdens.data import (
    DatasetBundle,
    DensityGrid,
    FixationTable,
    GridFormatError,
    ImageRecord,
    ValidationError,
    load_dataset,
    read_grid,
    write_grid,
)
from fixdens.kde import AdaptiveKernelParams, FixedKernelParams

__all__ = [
    "AdaptiveKernelParams",
    "DatasetBundle",
    "DensityGrid",
    "FixationTable",
    "FixedKernelParams",
    "GridFormatError",
    "ImageRecord",
    "ValidationError",
    "load_dataset",
    "read_grid",
    "write_grid",
]

__version__ = "0.1.0"
