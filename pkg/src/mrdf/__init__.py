"""Audio-visual deepfake detection with cross- and within-modality regularization."""

from mrdf.core_types import (
    Category,
    FeatureClip,
    LabelSet,
    LossBreakdown,
    Sample,
    labels_from_category,
)

__version__ = "0.1.0"

__all__ = [
    "Category",
    "FeatureClip",
    "LabelSet",
    "LossBreakdown",
    "Sample",
    "labels_from_category",
    "__version__",
]
