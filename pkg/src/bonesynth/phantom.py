"""Synthetic CT phantoms with known deformations.

Bones are anisotropic Gaussian blobs on an air background, so intensities
inside each bone vary smoothly (the masked MSE needs internal contrast to
produce a gradient). Every function is deterministic given its seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bonesynth import rng
from bonesynth.registration import BSplineGrid, SimilarityTransform
from bonesynth.volcore import LabelVolume, ScalarVolume, voxel_positions

BACKGROUND_HU = -1000.0
PEAK_HU = 2000.0


@dataclass(frozen=True)
class Blob:
    center_mm: tuple[float, float, float]
    sigma_mm: tuple[float, float, float]
    label: int
    peak_hu: float = PEAK_HU


def make_blobs(dims=(64, 64, 64), spacing_mm=(2.0, 2.0, 2.0), n_blobs: int = 6, seed: int = 0,
               region=(0.3, 0.7), sigma_range_mm=(7.0, 12.0)) -> list[Blob]:
    """Blobs with centres inside the central ``region`` fraction of the field of view."""
    extent = np.array([(n - 1) * s for n, s in zip(dims, spacing_mm)])
    u = rng.uniform(seed, 101, 6 * n_blobs).reshape(n_blobs, 6)
    lo, hi = region
    blobs = []
    for b in range(n_blobs):
        center = extent * (lo + (hi - lo) * u[b, :3])
        sigma = sigma_range_mm[0] + (sigma_range_mm[1] - sigma_range_mm[0]) * u[b, 3:]
        blobs.append(Blob(tuple(center), tuple(sigma), b + 1))
    return blobs


def _contributions(blobs: list[Blob], points: np.ndarray) -> np.ndarray:
    out = np.empty((len(blobs), *points.shape[:-1]))
    for i, b in enumerate(blobs):
        q = (((points - np.asarray(b.center_mm)) / np.asarray(b.sigma_mm)) ** 2).sum(axis=-1)
        out[i] = b.peak_hu * np.exp(-0.5 * q)
    return out


def render(blobs: list[Blob], points: np.ndarray, threshold_hu: float = 100.0):
    """Intensity and label arrays at physical ``points`` (shape ``(..., 3)``)."""
    contrib = _contributions(blobs, points)
    intensity = BACKGROUND_HU + contrib.sum(axis=0)
    ids = np.asarray([b.label for b in blobs])
    labels = np.where(intensity > threshold_hu, ids[np.argmax(contrib, axis=0)], 0)
    return intensity, labels


def phantom(dims=(64, 64, 64), spacing_mm=(2.0, 2.0, 2.0), n_blobs: int = 6, seed: int = 0,
            points: np.ndarray | None = None, blobs: list[Blob] | None = None):
    """Reference scan and labels; ``points`` overrides the sampling positions."""
    blobs = blobs if blobs is not None else make_blobs(dims, spacing_mm, n_blobs, seed)
    pts = voxel_positions(dims, spacing_mm) if points is None else points
    intensity, labels = render(blobs, pts)
    return (ScalarVolume(intensity, spacing_mm),
            LabelVolume(labels, spacing_mm, len(blobs) + 1))


def random_grid(dims, spacing_mm, control_spacing_mm, amplitude_mm: float, seed: int) -> BSplineGrid:
    """B-spline grid with coefficients uniform in ``[-amplitude, amplitude]``."""
    grid = BSplineGrid.covering(dims, spacing_mm, control_spacing_mm)
    n = int(np.prod(grid.coefficients.shape))
    coeffs = amplitude_mm * (2.0 * rng.uniform(seed, 202, n) - 1.0)
    return grid.with_coefficients(coeffs.reshape(grid.coefficients.shape))


def invert_grid(grid: BSplineGrid, points: np.ndarray, iters: int = 100) -> np.ndarray:
    """Solve ``y + u(y) = x`` for every point ``x`` by fixed-point iteration."""
    y = points.copy()
    for _ in range(iters):
        y_new = points - grid.evaluate(y)
        if np.max(np.abs(y_new - y)) < 1e-10:
            return y_new
        y = y_new
    return y


def deformed_copy(blobs: list[Blob], dims, spacing_mm, grid: BSplineGrid | None = None,
                  transform: SimilarityTransform | None = None):
    """Phantom whose content is the reference pulled back through ``grid`` then ``transform``.

    The copy is sampled as ``reference(T(y + u(y)))``: its voxel ``y`` shows
    the reference point ``T(y + u(y))``. Returns scan, labels and the exact
    reference-to-copy correspondence field on the reference grid (the field
    a perfect registration with the reference as fixed image would return).
    """
    pos = voxel_positions(dims, spacing_mm)
    pts = pos
    if grid is not None:
        pts = pts + grid.evaluate(pts)
    if transform is not None:
        pts = transform.apply(pts)
    scan, labels = phantom(dims, spacing_mm, points=pts, blobs=blobs)
    # inverse: reference x -> copy y with T(y + u(y)) = x
    target = pos if transform is None else transform.inverse_apply(pos)
    y = target if grid is None else invert_grid(grid, target)
    return scan, labels, y - pos


def phantom_suite(dims=(48, 48, 48), spacing_mm=(2.0, 2.0, 2.0), n_copies: int = 4, seed: int = 0,
                  amplitude_mm: float = 3.0, control_spacing_mm: float = 32.0):
    """Reference pair plus ``n_copies`` smoothly deformed copies.

    Returns ``(reference, copies)`` where ``reference`` is ``(scan, labels)``
    and each copy is ``(scan, labels, true_field)``.
    """
    blobs = make_blobs(dims, spacing_mm, seed=seed, sigma_range_mm=(8.0, 12.0))
    reference = phantom(dims, spacing_mm, blobs=blobs)
    copies = []
    for i in range(n_copies):
        grid = random_grid(dims, spacing_mm, control_spacing_mm, amplitude_mm, seed=1000 * (seed + 1) + i)
        copies.append(deformed_copy(blobs, dims, spacing_mm, grid))
    return reference, copies
