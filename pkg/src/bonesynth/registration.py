"""Similarity pre-alignment and multiscale cubic B-spline registration.

Fields produced here are expressed on the fixed (reference) grid and point
into the moving image: the fixed voxel at ``x`` corresponds to the moving
position ``x + f(x)``, so ``warp_scalar(moving, f)`` approximates ``fixed``.

The similarity measure is the bone-masked mean squared error: only voxels
where both images exceed the bone threshold contribute, and the sum is
normalised by the number of such voxels.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

from bonesynth.errors import DivergedError, NoBoneContentError, ValidationError
from bonesynth.volcore import (
    AIR_HU,
    DeformationField,
    ScalarVolume,
    Triple,
    _as_spacing,
    resample,
    sample_trilinear,
    voxel_positions,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RegistrationConfig:
    """Parameters of the similarity and deformable stages.

    ``control_spacing_mm`` lists one spacing per pyramid level, coarse to
    fine; each entry is a scalar or a triple. ``step_size`` is the largest
    per-step coefficient move as a fraction of the level's control spacing.
    ``seed`` is recorded for provenance; the optimizer itself is deterministic.
    """

    levels: int = 3
    iters_per_level: int = 60
    step_size: float = 0.05
    bone_threshold_hu: float = 100.0
    control_spacing_mm: tuple = (32.0, 16.0, 8.0)
    displacement_cap_fraction: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if int(self.levels) < 1:
            raise ValidationError("levels must be >= 1")
        if int(self.iters_per_level) < 1:
            raise ValidationError("iters_per_level must be >= 1")
        if not (self.step_size > 0):
            raise ValidationError("step_size must be positive")
        if not (0.0 < self.displacement_cap_fraction < 1.0):
            raise ValidationError("displacement_cap_fraction must lie in (0, 1)")
        spacings = []
        for cs in self.control_spacing_mm:
            if np.ndim(cs) == 0:
                cs = (cs, cs, cs)
            spacings.append(_as_spacing(cs))
        if len(spacings) != int(self.levels):
            raise ValidationError(
                f"control_spacing_mm needs one entry per level ({self.levels}), got {len(spacings)}"
            )
        object.__setattr__(self, "levels", int(self.levels))
        object.__setattr__(self, "iters_per_level", int(self.iters_per_level))
        object.__setattr__(self, "control_spacing_mm", tuple(spacings))
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def from_dict(cls, doc: dict) -> RegistrationConfig:
        if not isinstance(doc, dict):
            raise ValidationError("registration config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValidationError(f"unknown registration config keys: {unknown}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> RegistrationConfig:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["control_spacing_mm"] = [list(cs) for cs in self.control_spacing_mm]
        return doc


# ---------------------------------------------------------------------------
# similarity measure


def masked_mse(fixed: ScalarVolume, warped_moving: ScalarVolume, threshold_hu: float = 100.0) -> tuple[float, int]:
    """Mean squared difference over voxels where both images exceed ``threshold_hu``.

    Returns ``(loss, mask_size)``; an empty mask gives ``(0.0, 0)``.
    """
    if fixed.dims != warped_moving.dims:
        raise ValidationError(f"masked_mse: dims {fixed.dims} != {warped_moving.dims}")
    return _masked_mse_arrays(fixed.data, warped_moving.data, threshold_hu)


def _masked_mse_arrays(fixed: np.ndarray, moving: np.ndarray, threshold: float) -> tuple[float, int]:
    mask = (moving > threshold) & (fixed > threshold)
    n = int(np.count_nonzero(mask))
    if n == 0:
        return 0.0, 0
    r = moving[mask] - fixed[mask]
    return float(np.dot(r, r) / n), n


# ---------------------------------------------------------------------------
# similarity transform


@dataclass(frozen=True)
class SimilarityTransform:
    """Maps moving physical coordinates into fixed space: ``y = scale * R x + t``."""

    rotation: np.ndarray
    scale: float
    translation_mm: Triple

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or np.linalg.det(rot) <= 0:
            raise ValidationError("rotation must be a proper orthonormal matrix")
        if not (self.scale > 0):
            raise ValidationError("scale must be positive")
        rot.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "translation_mm", tuple(float(v) for v in self.translation_mm))

    @classmethod
    def identity(cls) -> SimilarityTransform:
        return cls(np.eye(3), 1.0, (0.0, 0.0, 0.0))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (points @ self.rotation.T) + np.asarray(self.translation_mm)

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        return ((points - np.asarray(self.translation_mm)) @ self.rotation) / self.scale

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "scale": self.scale,
            "translation_mm": list(self.translation_mm),
        }


def _bone_points(vol: ScalarVolume, threshold: float) -> np.ndarray:
    idx = np.argwhere(vol.data > threshold).astype(np.float64)
    return idx * np.asarray(vol.spacing_mm)


def _moments(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = points.mean(axis=0)
    d = points - mu
    return mu, d.T @ d / len(points)


class _SimilarityObjective:
    """Masked MSE of the moving image pulled back onto fixed bone voxels."""

    def __init__(self, fixed: ScalarVolume, moving: ScalarVolume, threshold: float):
        mask = fixed.data > threshold
        self.points = np.argwhere(mask).astype(np.float64) * np.asarray(fixed.spacing_mm)
        self.values = fixed.data[mask]
        self.moving = moving
        self.threshold = threshold
        self.min_overlap = max(1, int(0.05 * len(self.values)))

    def __call__(self, transform: SimilarityTransform) -> float:
        src = transform.inverse_apply(self.points) / np.asarray(self.moving.spacing_mm)
        vals = sample_trilinear(self.moving.data, src, oob_value=AIR_HU)
        keep = vals > self.threshold
        n = int(np.count_nonzero(keep))
        # A vanishing overlap would otherwise score as a perfect match.
        if n < self.min_overlap:
            return np.inf
        r = vals[keep] - self.values[keep]
        return float(np.dot(r, r) / n)


def _params_to_transform(params: np.ndarray, base_rot: np.ndarray, mu_m: np.ndarray,
                         mu_f: np.ndarray) -> SimilarityTransform:
    rot = Rotation.from_euler("xyz", params[3:6]).as_matrix() @ base_rot
    scale = float(np.exp(params[6]))
    t = mu_f + params[:3] - scale * rot @ mu_m
    return SimilarityTransform(rot, scale, tuple(t))


def similarity_register(fixed: ScalarVolume, moving: ScalarVolume,
                        cfg: RegistrationConfig | None = None) -> SimilarityTransform:
    """Procrustes-style alignment (translation, rotation, uniform scale).

    Initialises from centroids and second moments of the above-threshold
    voxels, then refines translation, Euler angles and log-scale by a
    deterministic coordinate pattern search on the masked MSE.
    """
    cfg = cfg or RegistrationConfig()
    thr = cfg.bone_threshold_hu
    pf = _bone_points(fixed, thr)
    pm = _bone_points(moving, thr)
    if len(pf) == 0 or len(pm) == 0:
        raise NoBoneContentError()
    mu_f, cov_f = _moments(pf)
    mu_m, cov_m = _moments(pm)

    det_f, det_m = np.linalg.det(cov_f), np.linalg.det(cov_m)
    if det_f > 0 and det_m > 0:
        scale0 = (det_f / det_m) ** (1.0 / 6.0)
    else:
        vox_f = np.prod(fixed.spacing_mm) * len(pf)
        vox_m = np.prod(moving.spacing_mm) * len(pm)
        scale0 = (vox_f / vox_m) ** (1.0 / 3.0)

    objective = _SimilarityObjective(fixed, moving, thr)

    # Principal-axis rotations are ambiguous up to axis signs; try each proper
    # candidate and the identity, keep whichever scores best.
    candidates = [np.eye(3)]
    _, vec_f = np.linalg.eigh(cov_f)
    _, vec_m = np.linalg.eigh(cov_m)
    for signs in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
        rot = vec_f @ np.diag(signs) @ vec_m.T
        if np.linalg.det(rot) < 0:
            rot = vec_f @ np.diag([-s for s in signs]) @ vec_m.T
        candidates.append(rot)
    params = np.array([0, 0, 0, 0, 0, 0, np.log(scale0)], dtype=np.float64)
    scored = [(objective(_params_to_transform(params, r, mu_m, mu_f)), i) for i, r in enumerate(candidates)]
    best_loss, best_i = min(scored)
    base_rot = candidates[best_i]

    spacing = float(np.mean(fixed.spacing_mm))
    unit = np.array([spacing] * 3 + [0.02] * 3 + [0.01])
    mult = 2.0
    loss = best_loss
    for _ in range(400):
        improved = False
        for k in range(7):
            for sign in (1.0, -1.0):
                trial = params.copy()
                trial[k] += sign * mult * unit[k]
                trial_loss = objective(_params_to_transform(trial, base_rot, mu_m, mu_f))
                if trial_loss < loss:
                    params, loss, improved = trial, trial_loss, True
                    break
        if not improved:
            mult *= 0.5
            if mult < 1.0 / 256:
                break
    result = _params_to_transform(params, base_rot, mu_m, mu_f)
    logger.debug("similarity: scale=%.4f t=%s loss=%.3f", result.scale, result.translation_mm, loss)
    return result


# ---------------------------------------------------------------------------
# cubic B-spline grid


def bspline3(t: np.ndarray) -> np.ndarray:
    """Centred cubic B-spline kernel."""
    a = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(a)
    inner = a < 1.0
    outer = (a >= 1.0) & (a < 2.0)
    out[inner] = 2.0 / 3.0 - a[inner] ** 2 + 0.5 * a[inner] ** 3
    out[outer] = (2.0 - a[outer]) ** 3 / 6.0
    return out


def _required_control_dims(dims, spacing_mm, control_spacing_mm) -> tuple[int, int, int]:
    # control point k sits at (k - 1) * h; the last voxel needs index floor(u) + 3
    return tuple(
        int(np.floor((n - 1) * s / h + 1e-9)) + 4
        for n, s, h in zip(dims, spacing_mm, control_spacing_mm)
    )


@dataclass(frozen=True)
class BSplineGrid:
    """Cubic B-spline control grid; control point ``k`` sits at ``(k - 1) * h`` mm."""

    control_spacing_mm: Triple
    control_dims: tuple[int, int, int]
    coefficients: np.ndarray
    order: int = 3

    def __post_init__(self):
        if self.order != 3:
            raise ValidationError("only cubic B-spline grids are supported")
        object.__setattr__(self, "control_spacing_mm", _as_spacing(self.control_spacing_mm))
        cdims = tuple(int(c) for c in self.control_dims)
        coeffs = np.array(self.coefficients, dtype=np.float64)
        if coeffs.shape != (*cdims, 3):
            raise ValidationError(f"coefficients shape {coeffs.shape} != {(*cdims, 3)}")
        if min(cdims) < 4:
            raise ValidationError("control grid needs at least 4 points per axis")
        coeffs.flags.writeable = False
        object.__setattr__(self, "control_dims", cdims)
        object.__setattr__(self, "coefficients", coeffs)

    @classmethod
    def covering(cls, dims, spacing_mm, control_spacing_mm, coefficients=None) -> BSplineGrid:
        """Smallest grid that covers the image domain, zero coefficients by default."""
        if np.ndim(control_spacing_mm) == 0:
            control_spacing_mm = (control_spacing_mm,) * 3
        cs = _as_spacing(control_spacing_mm)
        cdims = _required_control_dims(dims, _as_spacing(spacing_mm), cs)
        if coefficients is None:
            coefficients = np.zeros((*cdims, 3))
        return cls(cs, cdims, coefficients)

    def covers(self, dims, spacing_mm) -> bool:
        need = _required_control_dims(dims, spacing_mm, self.control_spacing_mm)
        return all(have >= req for have, req in zip(self.control_dims, need))

    def with_coefficients(self, coefficients: np.ndarray) -> BSplineGrid:
        return BSplineGrid(self.control_spacing_mm, self.control_dims, coefficients)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Displacement at arbitrary physical points (shape ``(..., 3)``).

        Points beyond the supported span are clamped to its border.
        """
        pts = np.asarray(points, dtype=np.float64)
        shape = pts.shape[:-1]
        p = pts.reshape(-1, 3)
        cx, cy, cz = self.control_dims
        flat_coeffs = self.coefficients.reshape(-1, 3)
        out = np.empty((p.shape[0], 3))
        offsets = np.arange(4)
        for lo in range(0, p.shape[0], _EVAL_CHUNK):
            q = p[lo:lo + _EVAL_CHUNK]
            weights, indices = [], []
            for a in range(3):
                n = self.control_dims[a]
                u = np.clip(q[:, a] / self.control_spacing_mm[a] + 1.0, 1.0, n - 2.0)
                base = np.minimum(np.floor(u).astype(np.intp), n - 3) - 1
                idx = base[:, None] + offsets[None, :]
                weights.append(bspline3(u[:, None] - idx))
                indices.append(idx)
            w = (weights[0][:, :, None, None] * weights[1][:, None, :, None]
                 * weights[2][:, None, None, :]).reshape(len(q), 64)
            flat = ((indices[0][:, :, None, None] * cy + indices[1][:, None, :, None]) * cz
                    + indices[2][:, None, None, :]).reshape(len(q), 64)
            out[lo:lo + _EVAL_CHUNK] = np.einsum("nk,nkc->nc", w, flat_coeffs[flat])
        return out.reshape(*shape, 3)


_EVAL_CHUNK = 16384


def _basis_matrix(n_vox: int, spacing: float, control_spacing: float, n_ctrl: int) -> np.ndarray:
    u = np.arange(n_vox) * spacing / control_spacing + 1.0
    return bspline3(u[:, None] - np.arange(n_ctrl)[None, :])


def _basis_matrices(grid: BSplineGrid, dims, spacing_mm) -> list[np.ndarray]:
    return [
        _basis_matrix(n, s, h, c)
        for n, s, h, c in zip(dims, spacing_mm, grid.control_spacing_mm, grid.control_dims)
    ]


def _tensor_apply(mats, coeffs: np.ndarray) -> np.ndarray:
    out = np.tensordot(mats[0], coeffs, axes=(1, 0))
    out = np.einsum("yj,xjkc->xykc", mats[1], out, optimize=True)
    return np.einsum("zk,xykc->xyzc", mats[2], out, optimize=True)


def _tensor_apply_transpose(mats, values: np.ndarray) -> np.ndarray:
    out = np.tensordot(mats[0].T, values, axes=(1, 0))
    out = np.einsum("jy,xykc->xjkc", mats[1].T, out, optimize=True)
    return np.einsum("kz,xjzc->xjkc", mats[2].T, out, optimize=True)


def densify(grid: BSplineGrid, dims, spacing_mm) -> DeformationField:
    """Evaluate the B-spline tensor product at every voxel of a grid."""
    spacing = _as_spacing(spacing_mm)
    if not grid.covers(dims, spacing):
        raise ValidationError(
            f"control grid {grid.control_dims} does not cover dims {tuple(dims)} at spacing {spacing}"
        )
    return DeformationField(_tensor_apply(_basis_matrices(grid, dims, spacing), grid.coefficients), spacing)


# ---------------------------------------------------------------------------
# field composition


def compose_fields(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """``result(x) = inner(x) + outer(x + inner(x))``, outer sampled trilinearly.

    Sample positions beyond the grid take the border value of ``outer``.
    """
    if outer.dims != inner.dims:
        raise ValidationError(f"compose_fields: dims {outer.dims} != {inner.dims}")
    sp = np.asarray(inner.spacing_mm)
    idx = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in inner.dims], indexing="ij"), axis=-1)
    coords = idx + inner.data / sp
    sampled = np.stack(
        [sample_trilinear(outer.data[..., k], coords) for k in range(3)], axis=-1
    )
    return DeformationField(inner.data + sampled, inner.spacing_mm)


# ---------------------------------------------------------------------------
# deformable registration


class _LevelObjective:
    """Masked MSE and its gradient with respect to B-spline coefficients.

    Only fixed voxels above threshold can enter the mask, so the moving image
    is sampled at those voxels alone.
    """

    def __init__(self, fixed: np.ndarray, moving: np.ndarray, spacing, grid: BSplineGrid, threshold: float):
        self.spacing = np.asarray(spacing, dtype=np.float64)
        self.dims = fixed.shape
        self.moving = moving
        self.threshold = threshold
        self.fmask = fixed > threshold
        self.flat_idx = np.flatnonzero(self.fmask)
        self.fvals = fixed.reshape(-1)[self.flat_idx]
        self.vox_idx = np.argwhere(self.fmask).astype(np.float64)
        self.mats = _basis_matrices(grid, self.dims, tuple(self.spacing))

    def displacement(self, coeffs: np.ndarray) -> np.ndarray:
        return _tensor_apply(self.mats, coeffs)

    def loss(self, coeffs: np.ndarray) -> tuple[float, int]:
        return self._evaluate(coeffs, want_grad=False)[:2]

    def loss_and_grad(self, coeffs: np.ndarray):
        return self._evaluate(coeffs, want_grad=True)

    def _evaluate(self, coeffs, want_grad):
        if len(self.flat_idx) == 0:
            return 0.0, 0, np.zeros_like(coeffs)
        disp = self.displacement(coeffs).reshape(-1, 3)[self.flat_idx]
        coords = self.vox_idx + disp / self.spacing
        if want_grad:
            vals, dvals = sample_trilinear(self.moving, coords, oob_value=AIR_HU, with_gradient=True)
        else:
            vals = sample_trilinear(self.moving, coords, oob_value=AIR_HU)
        keep = vals > self.threshold
        n = int(np.count_nonzero(keep))
        if n == 0:
            return 0.0, 0, np.zeros_like(coeffs)
        r = np.where(keep, vals - self.fvals, 0.0)
        loss = float(np.dot(r, r) / n)
        if not want_grad:
            return loss, n, None
        # mask held fixed: dL/dg = 2/n * r * dI/dx, with dI/dx in per-mm units
        g_local = (2.0 / n) * r[:, None] * dvals / self.spacing
        g_full = np.zeros((int(np.prod(self.dims)), 3))
        g_full[self.flat_idx] = g_local
        grad = _tensor_apply_transpose(self.mats, g_full.reshape(*self.dims, 3))
        return loss, n, grad


def masked_mse_gradient(fixed: ScalarVolume, moving: ScalarVolume, grid: BSplineGrid,
                        threshold_hu: float = 100.0) -> tuple[float, np.ndarray]:
    """Masked MSE of ``moving`` warped by ``grid`` and its coefficient gradient.

    The mask is treated as constant, so the gradient is exact wherever no voxel
    crosses the threshold or a trilinear cell boundary.
    """
    if fixed.dims != moving.dims:
        raise ValidationError(f"dims {fixed.dims} != {moving.dims}")
    obj = _LevelObjective(fixed.data, moving.data, fixed.spacing_mm, grid, threshold_hu)
    loss, _, grad = obj.loss_and_grad(np.asarray(grid.coefficients))
    return loss, grad


@dataclass
class LevelReport:
    level: int
    dims: tuple[int, int, int]
    control_spacing_mm: Triple
    losses: list[float] = field(default_factory=list)


@dataclass
class RegistrationResult:
    field: DeformationField
    grids: list[BSplineGrid]
    initial_loss: float
    final_loss: float
    levels: list[LevelReport]


def _optimize_level(obj: _LevelObjective, grid: BSplineGrid, cfg: RegistrationConfig,
                    report: LevelReport) -> np.ndarray:
    h = np.asarray(grid.control_spacing_mm)
    cap = cfg.displacement_cap_fraction * h
    max_step = min(cfg.step_size, cfg.displacement_cap_fraction) * h
    coeffs = np.zeros_like(grid.coefficients)
    loss, _, grad = obj.loss_and_grad(coeffs)
    report.losses.append(loss)
    scale = 1.0
    for _ in range(cfg.iters_per_level):
        gmax = np.max(np.abs(grad))
        if not np.isfinite(gmax):
            raise DivergedError()
        if gmax == 0.0:
            break
        accepted = False
        while scale >= 1e-3:
            proposal = np.clip(coeffs - scale * max_step * grad / gmax, -cap, cap)
            if np.array_equal(proposal, coeffs):
                scale *= 0.5
                continue
            new_loss, _ = obj.loss(proposal)
            if not np.isfinite(new_loss):
                raise DivergedError()
            if new_loss < loss:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        coeffs = proposal
        loss, _, grad = obj.loss_and_grad(coeffs)
        report.losses.append(loss)
        scale = min(1.0, scale * 2.0)
    return coeffs


def _pyramid_level(vol: ScalarVolume, factor: int) -> ScalarVolume:
    if factor == 1:
        return vol
    smoothed = gaussian_filter(vol.data, sigma=0.5 * factor, mode="nearest")
    target = tuple(s * factor for s in vol.spacing_mm)
    return resample(ScalarVolume(smoothed, vol.spacing_mm), target, "trilinear")


def _apply_chain(grids: list[BSplineGrid], points: np.ndarray) -> np.ndarray:
    # composition x -> phi_1(phi_2(...phi_L(x))), finest grid applied first
    p = points
    for grid in reversed(grids):
        p = p + grid.evaluate(p)
    return p


def register_deformable(fixed: ScalarVolume, moving: ScalarVolume,
                        init: SimilarityTransform | None = None,
                        cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Multiscale B-spline registration with full diagnostics.

    The moving image is resampled once onto the fixed grid under ``init``.
    Each pyramid level (factor 2 per level, coarse to fine) optimises a fresh
    cubic B-spline increment composed after the previous levels, with every
    coefficient clamped to ``displacement_cap_fraction`` of its control
    spacing so each increment stays locally invertible.
    """
    cfg = cfg or RegistrationConfig()
    init = init or SimilarityTransform.identity()
    thr = cfg.bone_threshold_hu
    if not np.any(fixed.data > thr) or not np.any(moving.data > thr):
        raise NoBoneContentError()

    positions = voxel_positions(fixed.dims, fixed.spacing_mm)
    src = init.inverse_apply(positions) / np.asarray(moving.spacing_mm)
    aligned = ScalarVolume(sample_trilinear(moving.data, src, oob_value=AIR_HU), fixed.spacing_mm)
    initial_loss, _ = masked_mse(fixed, aligned, thr)
    if not np.isfinite(initial_loss):
        raise DivergedError()

    grids: list[BSplineGrid] = []
    reports: list[LevelReport] = []
    for level in range(cfg.levels):
        factor = 2 ** (cfg.levels - 1 - level)
        fixed_l = _pyramid_level(fixed, factor)
        aligned_l = _pyramid_level(aligned, factor)
        sp = np.asarray(fixed_l.spacing_mm)
        pts = voxel_positions(fixed_l.dims, fixed_l.spacing_mm)
        moving_l = sample_trilinear(aligned_l.data, _apply_chain(grids, pts) / sp, oob_value=AIR_HU)
        if factor == 1 and grids:
            # coarse levels optimise blurred images; never let them worsen the full-resolution fit
            chained, _ = _masked_mse_arrays(fixed_l.data, moving_l, thr)
            if chained > initial_loss:
                logger.info("coarse levels increased full-resolution loss; discarding them")
                grids = []
                moving_l = aligned_l.data
        grid = BSplineGrid.covering(fixed_l.dims, fixed_l.spacing_mm, cfg.control_spacing_mm[level])
        report = LevelReport(level, fixed_l.dims, grid.control_spacing_mm)
        obj = _LevelObjective(fixed_l.data, moving_l, fixed_l.spacing_mm, grid, thr)
        coeffs = _optimize_level(obj, grid, cfg, report)
        logger.info("level %d dims=%s loss %.4g -> %.4g (%d steps)", level, fixed_l.dims,
                    report.losses[0], report.losses[-1], len(report.losses) - 1)
        grids.append(grid.with_coefficients(coeffs))
        reports.append(report)

    warped_to = init.inverse_apply(_apply_chain(grids, positions))
    result_field = DeformationField(warped_to - positions, fixed.spacing_mm)
    final_loss = reports[-1].losses[-1]
    if not np.isfinite(final_loss):
        raise DivergedError()
    return RegistrationResult(result_field, grids, initial_loss, final_loss, reports)


def bspline_register_multiscale(fixed: ScalarVolume, moving: ScalarVolume,
                                init: SimilarityTransform | None = None,
                                cfg: RegistrationConfig | None = None) -> DeformationField:
    """Dense fixed-to-moving correspondence field (similarity applied first)."""
    return register_deformable(fixed, moving, init, cfg).field


def register(fixed: ScalarVolume, moving: ScalarVolume, cfg: RegistrationConfig | None = None) -> DeformationField:
    """Similarity alignment followed by deformable refinement."""
    cfg = cfg or RegistrationConfig()
    init = similarity_register(fixed, moving, cfg)
    return bspline_register_multiscale(fixed, moving, init, cfg)
