"""Synthetic labelled CT volumes from registration-derived deformation models."""

from bonesynth.errors import (
    BonesynthError,
    DivergedError,
    NoBoneContentError,
    UndefinedMetricError,
    ValidationError,
)
from bonesynth.volcore import (
    DeformationField,
    LabelVolume,
    ScalarVolume,
    SwapTable,
    jacobian_determinants,
    resample,
    sagittal_flip_relabel,
    warp_labels,
    warp_scalar,
)

__version__ = "0.1.0"

__all__ = [
    "BonesynthError",
    "DeformationField",
    "DivergedError",
    "LabelVolume",
    "NoBoneContentError",
    "ScalarVolume",
    "SwapTable",
    "UndefinedMetricError",
    "ValidationError",
    "jacobian_determinants",
    "resample",
    "sagittal_flip_relabel",
    "warp_labels",
    "warp_scalar",
]
