"""Python bindings for the clusvpr place recognition library."""

from ._core import (
    ConfigError,
    Index,
    Model,
    NumericalFailure,
    geo_distance,
    gradcheck,
    load_image,
    param_counts,
    parse_config,
    preset_names,
    pyramid_loss,
    pyramid_scores,
    resolve_config,
    softmax_triplet_loss,
    synth_world,
    train,
)

__all__ = [
    "ConfigError",
    "Index",
    "Model",
    "NumericalFailure",
    "geo_distance",
    "gradcheck",
    "load_image",
    "param_counts",
    "parse_config",
    "preset_names",
    "pyramid_loss",
    "pyramid_scores",
    "resolve_config",
    "softmax_triplet_loss",
    "synth_world",
    "train",
]
