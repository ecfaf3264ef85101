"""Pulmonary vessel segmentation toolkit for chest CT volumes."""

from .volume import Connectivity, LabelVolume, Volume3D, load_metaimage, save_metaimage
from .medialness import FilterConfig, MedialnessField, run_filter
from .config import PipelineConfig

__version__ = "0.1.0"

__all__ = [
    "Connectivity",
    "LabelVolume",
    "Volume3D",
    "load_metaimage",
    "save_metaimage",
    "FilterConfig",
    "MedialnessField",
    "run_filter",
    "PipelineConfig",
    "__version__",
]
