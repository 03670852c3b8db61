"""TFMAN: single-image super-resolution with trainable feature matching and
block-divided non-local attention, built on a small numpy autodiff core."""

from .cost import cost_report, mac_nonlocal, mac_srnl, memory_peak
from .image import DegradationSpec, ImageRGB, degrade, read_png, write_png
from .net import TFMAN, TfmanConfig, build, parameter_count
from .tensor import ConfigurationError, Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "TFMAN", "TfmanConfig", "build", "parameter_count",
    "Tensor", "no_grad", "precision", "ConfigurationError",
    "DegradationSpec", "ImageRGB", "degrade", "read_png", "write_png",
    "cost_report", "mac_nonlocal", "mac_srnl", "memory_peak",
]
