"""Algorithmic evaluation corruptions. Never imported by the training path."""
from .jpeg import jpeg_roundtrip
from .kinds import GENERATORS
from .plasma import diamond_square_field
from .suite import (
    CATEGORIES,
    KINDS,
    SEVERITIES,
    CorruptionSpec,
    CorruptionSuite,
    SeverityTable,
    apply_corruption,
    build_corruption_suite,
    calibration_images,
    corrupt_images,
    distortion_curve,
    image_seed,
    mean_distortion,
)

__all__ = [
    "CATEGORIES", "GENERATORS", "KINDS", "SEVERITIES", "CorruptionSpec", "CorruptionSuite",
    "SeverityTable", "apply_corruption", "build_corruption_suite", "calibration_images",
    "corrupt_images", "diamond_square_field", "distortion_curve", "image_seed",
    "jpeg_roundtrip", "mean_distortion",
]
