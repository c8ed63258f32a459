"""Toolchain for turning digitized score pages into a curated symbol dataset
and a confidence-aware symbol classifier."""

__version__ = "0.1.0"

from .imaging import AugmentConfig, Blob, BoundingBox, DogConfig  # noqa: F401
from .store import DatasetStore, LabelTaxonomy  # noqa: F401
