"""Python access to the C++ core: stain normalization, metrics, synthetic
scenes and inference with trained checkpoints. Images are float arrays of
shape (H, W, 3) with values in [0, 1]."""

from ._core import (
    ConfigError,
    ShapeMismatch,
    UlsaError,
    auroc,
    config_help,
    dice,
    gaussian_blur,
    generate_scene,
    lab_to_rgb,
    macenko_fit,
    macenko_transfer,
    optical_density,
    predict,
    reinhard_profile,
    reinhard_transfer,
    resolved_config,
    rgb_to_lab,
    selftest,
)

__all__ = [
    "ConfigError",
    "ShapeMismatch",
    "UlsaError",
    "auroc",
    "config_help",
    "dice",
    "gaussian_blur",
    "generate_scene",
    "lab_to_rgb",
    "macenko_fit",
    "macenko_transfer",
    "optical_density",
    "predict",
    "reinhard_profile",
    "reinhard_transfer",
    "resolved_config",
    "rgb_to_lab",
    "selftest",
]
