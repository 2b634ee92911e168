"""Dual-branch multi-modal 3D segmentation: synthetic data, metrics, training and gradient checks."""

from ._dualmod import (
    ConfigError,
    DataError,
    Error,
    NumericError,
    asd,
    check_grad,
    config_text,
    dice_score,
    evaluate_checkpoint,
    generate_sample,
    hu_window,
    minmax_normalize,
    param_count,
    split_counts,
    train,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Error",
    "NumericError",
    "asd",
    "check_grad",
    "config_text",
    "dice_score",
    "evaluate_checkpoint",
    "generate_sample",
    "hu_window",
    "minmax_normalize",
    "param_count",
    "split_counts",
    "train",
]
