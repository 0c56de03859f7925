"""Hierarchical consistency mean teacher for semi-supervised 3D segmentation."""

from hcmt.backbone import NetworkSpec, VNetMultiScale, build_network, forward_multiscale
from hcmt.errors import (
    ConfigError,
    DataError,
    HcmtError,
    NumericError,
    ShapeError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "NetworkSpec",
    "VNetMultiScale",
    "build_network",
    "forward_multiscale",
    "ConfigError",
    "DataError",
    "HcmtError",
    "NumericError",
    "ShapeError",
    "StateError",
]
