"""Uniform and class-balanced patch sampling.

Balanced sampling picks a foreground class uniformly among the classes
present in the volume, then a voxel of that class uniformly, then a patch
origin uniformly among the origins whose patch contains that voxel. Every
present class is therefore guaranteed-present in exactly the same fraction
of draws, however few voxels it has.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from bonesynth import rng
from bonesynth.errors import ValidationError
from bonesynth.volcore import LabelVolume, ScalarVolume

UNIFORM_STREAM = 11
BALANCED_STREAM = 12


def as_size(size) -> tuple[int, int, int]:
    if np.ndim(size) == 0:
        size = (size, size, size)
    out = tuple(int(s) for s in size)
    if len(out) != 3 or min(out) < 1:
        raise ValidationError(f"patch size must be three positive integers, got {size!r}")
    return out  # type: ignore[return-value]


@dataclass(frozen=True)
class PatchSpec:
    origin: tuple[int, int, int]
    size: tuple[int, int, int]
    guaranteed_class: int | None = None
    seed: int | None = None
    candidate_classes: tuple[int, ...] = field(default=(), compare=False)

    def check(self, dims) -> None:
        o, s = np.asarray(self.origin), np.asarray(self.size)
        if np.any(o < 0) or np.any(s < 1) or np.any(o + s > np.asarray(dims)):
            raise ValidationError(f"patch origin {self.origin} size {self.size} out of range for dims {tuple(dims)}")

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))  # type: ignore[return-value]

    def to_record(self) -> dict:
        return {
            "origin": list(self.origin),
            "size": list(self.size),
            "guaranteed_class": self.guaranteed_class,
            "seed": self.seed,
        }


def _check_fits(dims, size):
    if any(s > d for s, d in zip(size, dims)):
        raise ValidationError(f"patch size {size} exceeds volume dims {tuple(dims)}")


def uniform_patch(dims, size, seed: int) -> PatchSpec:
    """Origin uniform over all valid corner positions."""
    dims = tuple(int(d) for d in dims)
    size = as_size(size)
    _check_fits(dims, size)
    span = np.asarray(dims) - np.asarray(size) + 1
    origin = rng.integers(seed, UNIFORM_STREAM, span)
    return PatchSpec(tuple(int(v) for v in origin), size, None, int(seed))


class BalancedSampler:
    """Class-balanced sampler with the per-class voxel index precomputed."""

    def __init__(self, labels: LabelVolume, size):
        self.dims = labels.dims
        self.size = as_size(size)
        _check_fits(self.dims, self.size)
        flat = labels.data.reshape(-1)
        self.order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=labels.num_classes)
        self.starts = np.concatenate([[0], np.cumsum(counts)])
        self.counts = counts
        self.classes = tuple(int(c) for c in np.flatnonzero(counts) if c != 0)
        if not self.classes:
            raise ValidationError("no foreground class")

    def draw(self, seed: int) -> PatchSpec:
        c = self.classes[int(rng.integers(seed, BALANCED_STREAM, len(self.classes), start=0)[0])]
        k = int(rng.integers(seed, BALANCED_STREAM, int(self.counts[c]), start=1)[0])
        voxel = np.unravel_index(self.order[self.starts[c] + k], self.dims)
        dims, size = np.asarray(self.dims), np.asarray(self.size)
        v = np.asarray(voxel)
        lo = np.maximum(0, v - size + 1)
        hi = np.minimum(v, dims - size)
        origin = lo + rng.integers(seed, BALANCED_STREAM, hi - lo + 1, start=2)
        return PatchSpec(tuple(int(o) for o in origin), self.size, c, int(seed), self.classes)


def balanced_patch(labels: LabelVolume, size, seed: int) -> PatchSpec:
    return BalancedSampler(labels, size).draw(seed)


def extract_patch(vol: Union[ScalarVolume, LabelVolume], spec: PatchSpec):
    """Copy of the sub-volume described by ``spec``; spacing is kept."""
    spec.check(vol.dims)
    sub = vol.data[spec.slices()]
    if isinstance(vol, LabelVolume):
        return LabelVolume(sub, vol.spacing_mm, vol.num_classes)
    return ScalarVolume(sub, vol.spacing_mm, vol.kind_tag)
