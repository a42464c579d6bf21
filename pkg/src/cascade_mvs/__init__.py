"""Cascaded multi-view depth estimation with learned per-pixel depth ranges."""

from .errors import CascadeError
from .geometry import CameraParams
from .pipeline import CascadeOutput, StageConfig, fixed_range_baseline, infer
from .rem import DepthRangeMap, RemWeights

__version__ = "0.1.0"

__all__ = [
    "CameraParams",
    "CascadeError",
    "CascadeOutput",
    "DepthRangeMap",
    "RemWeights",
    "StageConfig",
    "fixed_range_baseline",
    "infer",
]
