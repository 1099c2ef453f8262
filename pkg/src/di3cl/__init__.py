"""Self-supervised contrastive pre-training for single-channel SAR
imagery, with segmentation fine-tuning and full-scene tiled inference."""

__version__ = "0.1.0"

from .errors import (
    CapacityError,
    ConfigError,
    DataError,
    DegenerateRegionError,
    Di3clError,
    DivergenceError,
    GeometryError,
    NotReadyError,
)

__all__ = [
    "__version__",
    "CapacityError",
    "ConfigError",
    "DataError",
    "DegenerateRegionError",
    "Di3clError",
    "DivergenceError",
    "GeometryError",
    "NotReadyError",
]
