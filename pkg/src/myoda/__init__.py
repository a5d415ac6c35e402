"""Unpaired MR-to-CT domain adaptation with self-training for thigh muscle
group segmentation: phantom data, translation/segmentation co-training,
entropy-ranked pseudo-label fine-tuning, and the evaluation suite."""

__version__ = "0.1.0"

from .core import DatasetManifest, Domain, Image2D, LabelMap, Mask, MaskKind, ValidationError

__all__ = [
    "DatasetManifest",
    "Domain",
    "Image2D",
    "LabelMap",
    "Mask",
    "MaskKind",
    "ValidationError",
    "__version__",
]
