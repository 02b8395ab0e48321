"""Learned time warping: an attention model that replaces DTW's alignment step."""

from __future__ import annotations

from .core import TimeSeries, TrainingConfig, WarpError
from .dtw import dtw_align, dtw_distance, dtw_metric
from .warpnet import WarpNetMetric, init_params, load_checkpoint, preset_arch, save_checkpoint

__all__ = [
    "TimeSeries",
    "TrainingConfig",
    "WarpError",
    "WarpNetMetric",
    "dtw_align",
    "dtw_distance",
    "dtw_metric",
    "init_params",
    "load_checkpoint",
    "preset_arch",
    "save_checkpoint",
]

__version__ = "0.1.0"
