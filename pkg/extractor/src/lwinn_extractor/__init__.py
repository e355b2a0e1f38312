"""Offline feature extraction producing LWNB bundles for the lwinn engine."""

from .extract import (
    ExtractConfig,
    FeatureNetwork,
    WeightsError,
    export_mask,
    extract_features,
    load_extract_config,
    preprocess,
)
from .pipeline import discover_split, run_extraction

__all__ = [
    "ExtractConfig",
    "FeatureNetwork",
    "WeightsError",
    "discover_split",
    "export_mask",
    "extract_features",
    "load_extract_config",
    "preprocess",
    "run_extraction",
]

__version__ = "0.1.0"
