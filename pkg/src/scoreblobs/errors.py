"""Shared exception types.

DataError marks problems with user-supplied data or on-disk artifacts; the
CLI maps it to exit code 2 (as opposed to usage errors = 1 and internal
errors = 3).
"""


class DataError(Exception):
    pass


class ImageError(DataError, ValueError):
    """Invalid image, bounding box, or detector configuration."""


class StoreError(DataError):
    """Corrupt or inconsistent dataset store."""


class AgreementError(DataError):
    """Ratings table unusable for the requested statistic."""
