"""Typed 3D volumes, interpolation, warping and geometric checks.

Arrays are indexed ``data[x, y, z]``; physical position of voxel ``(i, j, k)``
is ``(i * sx, j * sy, k * sz)`` in millimetres (voxel-centre convention, no
origin or orientation). Deformation fields hold displacements in millimetres
with shape ``(nx, ny, nz, 3)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Literal, Union

import numpy as np

from bonesynth.errors import ValidationError

Triple = tuple[float, float, float]

AIR_HU = -1024.0
# Index-space slack for "inside the volume" tests; absorbs round-off in
# positions computed as index + displacement / spacing.
_BOUNDS_TOL = 1e-6


def _as_spacing(spacing) -> Triple:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise ValidationError(f"spacing must have 3 components, got {spacing!r}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValidationError(f"spacing must be positive, got {spacing!r}")
    return sp  # type: ignore[return-value]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ScalarVolume:
    """Intensity grid (HU or arbitrary float) with voxel spacing."""

    data: np.ndarray
    spacing_mm: Triple
    kind_tag: Literal["scan", "derived"] = "scan"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"scan data must be a non-empty 3D array, got shape {data.shape}")
        if self.kind_tag not in ("scan", "derived"):
            raise ValidationError(f"unknown kind_tag {self.kind_tag!r}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing_mm", _as_spacing(self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class LabelVolume:
    """Integer class grid; class 0 is background."""

    data: np.ndarray
    spacing_mm: Triple
    num_classes: int

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise ValidationError(f"label data must be a non-empty 3D array, got shape {raw.shape}")
        if raw.dtype.kind == "f":
            if not np.all(raw == np.round(raw)):
                raise ValidationError("label data must be integral")
        elif raw.dtype.kind not in "iu":
            raise ValidationError(f"label data must be integer, got {raw.dtype}")
        data = raw.astype(np.int32)
        n = int(self.num_classes)
        if n < 2:
            raise ValidationError("num_classes must be >= 2")
        if data.min() < 0 or data.max() >= n:
            raise ValidationError(f"labels must lie in [0, {n})")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing_mm", _as_spacing(self.spacing_mm))
        object.__setattr__(self, "num_classes", n)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class DeformationField:
    """Per-voxel displacement in millimetres, shape ``(nx, ny, nz, 3)``."""

    data: np.ndarray
    spacing_mm: Triple

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[3] != 3 or min(data.shape[:3]) < 1:
            raise ValidationError(f"field data must have shape (nx, ny, nz, 3), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("field contains non-finite displacements")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing_mm", _as_spacing(self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])  # type: ignore[return-value]

    @classmethod
    def zeros(cls, dims, spacing_mm) -> DeformationField:
        return cls(np.zeros((*dims, 3)), spacing_mm)


@dataclass(frozen=True)
class SwapTable:
    """Left/right label pairs; labels not listed map to themselves."""

    pairs: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        pairs = tuple((int(a), int(b)) for a, b in self.pairs)
        seen: set[int] = set()
        for a, b in pairs:
            if a == b:
                raise ValidationError(f"swap pair maps label {a} to itself")
            if a < 0 or b < 0:
                raise ValidationError("swap labels must be non-negative")
            for lab in (a, b):
                if lab in seen:
                    raise ValidationError(f"label {lab} appears in more than one swap pair")
                seen.add(lab)
        object.__setattr__(self, "pairs", pairs)

    def partner(self, label: int) -> int:
        for a, b in self.pairs:
            if label == a:
                return b
            if label == b:
                return a
        return label

    def lookup(self, num_classes: int) -> np.ndarray:
        """Dense relabelling array of length ``num_classes``."""
        lut = np.arange(num_classes, dtype=np.int32)
        for a, b in self.pairs:
            if a < num_classes and b < num_classes:
                lut[a], lut[b] = b, a
            elif a < num_classes or b < num_classes:
                raise ValidationError(
                    f"swap pair ({a}, {b}) straddles num_classes={num_classes}"
                )
        return lut

    @classmethod
    def parse_csv(cls, text: str) -> SwapTable:
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        reader = csv.reader(io.StringIO("\n".join(lines)))
        pairs = []
        for row in reader:
            cells = [c.split("#", 1)[0].strip() for c in row]
            cells = [c for c in cells if c]
            if not cells:
                continue
            if cells[0].lower() == "left":
                continue
            if len(cells) != 2:
                raise ValidationError(f"swap table row must have two columns: {row!r}")
            try:
                pairs.append((int(cells[0]), int(cells[1])))
            except ValueError as exc:
                raise ValidationError(f"non-integer swap table entry: {row!r}") from exc
        return cls(tuple(pairs))

    @classmethod
    def from_csv(cls, path) -> SwapTable:
        return cls.parse_csv(Path(path).read_text(encoding="utf-8"))

    def to_csv(self) -> str:
        return "left,right\n" + "".join(f"{a},{b}\n" for a, b in self.pairs)

    @classmethod
    def upper_body(cls) -> SwapTable:
        """Left/right pairing of the 126-class upper-body bone label set."""
        text = resources.files("bonesynth.data").joinpath("upper_body_swap.csv").read_text("utf-8")
        return cls.parse_csv(text)


Volume = Union[ScalarVolume, LabelVolume]


def voxel_positions(dims, spacing_mm) -> np.ndarray:
    """Physical voxel-centre positions, shape ``(nx, ny, nz, 3)``."""
    axes = [np.arange(n, dtype=np.float64) * s for n, s in zip(dims, spacing_mm)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def sample_trilinear(data: np.ndarray, coords: np.ndarray, oob_value: float | None = None,
                     with_gradient: bool = False):
    """Trilinear sample of ``data`` at continuous index ``coords`` (shape ``(..., 3)``).

    Positions outside ``[0, n - 1]`` on any axis get ``oob_value``; when
    ``oob_value`` is None they are clamped to the border instead. With
    ``with_gradient`` the derivative with respect to the index coordinates is
    returned as a second array of shape ``(..., 3)`` (zero where out of bounds).
    """
    data = np.asarray(data)
    coords = np.asarray(coords, dtype=np.float64)
    out_shape = coords.shape[:-1]
    c = coords.reshape(-1, 3)
    dims = data.shape
    inside = np.ones(c.shape[0], dtype=bool)
    i0s, i1s, ts = [], [], []
    for a in range(3):
        n = dims[a]
        ca = c[:, a]
        if oob_value is not None:
            inside &= (ca >= -_BOUNDS_TOL) & (ca <= n - 1 + _BOUNDS_TOL)
        ca = np.clip(ca, 0.0, n - 1)
        i0 = np.minimum(np.floor(ca).astype(np.intp), max(n - 2, 0))
        i1 = np.minimum(i0 + 1, n - 1)
        i0s.append(i0)
        i1s.append(i1)
        ts.append(ca - i0)
    tx, ty, tz = ts
    flat = data.reshape(-1)
    sy, sz = dims[1] * dims[2], dims[2]

    def g(ix, iy, iz):
        return flat[ix * sy + iy * sz + iz]

    v000 = g(i0s[0], i0s[1], i0s[2])
    v100 = g(i1s[0], i0s[1], i0s[2])
    v010 = g(i0s[0], i1s[1], i0s[2])
    v110 = g(i1s[0], i1s[1], i0s[2])
    v001 = g(i0s[0], i0s[1], i1s[2])
    v101 = g(i1s[0], i0s[1], i1s[2])
    v011 = g(i0s[0], i1s[1], i1s[2])
    v111 = g(i1s[0], i1s[1], i1s[2])

    ux, uy, uz = 1.0 - tx, 1.0 - ty, 1.0 - tz
    a00 = v000 * ux + v100 * tx
    a10 = v010 * ux + v110 * tx
    a01 = v001 * ux + v101 * tx
    a11 = v011 * ux + v111 * tx
    b0 = a00 * uy + a10 * ty
    b1 = a01 * uy + a11 * ty
    val = b0 * uz + b1 * tz
    if oob_value is not None:
        val = np.where(inside, val, oob_value)
    val = val.reshape(out_shape)
    if not with_gradient:
        return val

    dx = ((v100 - v000) * uy + (v110 - v010) * ty) * uz + ((v101 - v001) * uy + (v111 - v011) * ty) * tz
    dy = (a10 - a00) * uz + (a11 - a01) * tz
    dz = b1 - b0
    grad = np.stack([dx, dy, dz], axis=-1)
    for a in range(3):
        if dims[a] == 1:
            grad[:, a] = 0.0
    if oob_value is not None:
        grad[~inside] = 0.0
    return val, grad.reshape(*out_shape, 3)


def sample_nearest(data: np.ndarray, coords: np.ndarray, oob_value=0) -> np.ndarray:
    """Nearest-neighbour sample at continuous index ``coords``; out of range gives ``oob_value``."""
    coords = np.asarray(coords, dtype=np.float64)
    out_shape = coords.shape[:-1]
    c = coords.reshape(-1, 3)
    idx = np.floor(c + 0.5).astype(np.intp)
    dims = np.asarray(data.shape)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    idx = np.clip(idx, 0, dims - 1)
    vals = data[idx[:, 0], idx[:, 1], idx[:, 2]]
    vals = np.where(inside, vals, oob_value).astype(data.dtype)
    return vals.reshape(out_shape)


def _check_same_dims(a, b, what: str):
    if tuple(a.dims) != tuple(b.dims):
        raise ValidationError(f"{what}: dims {a.dims} != {b.dims}")


def _interp_axis(arr: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    n = arr.shape[axis]
    c = np.clip(coords, 0.0, n - 1)
    i0 = np.minimum(np.floor(c).astype(np.intp), max(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    t = c - i0
    shape = [1] * arr.ndim
    shape[axis] = -1
    t = t.reshape(shape)
    return np.take(arr, i0, axis=axis) * (1.0 - t) + np.take(arr, i1, axis=axis) * t


def resample(vol: Volume, target_spacing_mm, mode: Literal["trilinear", "nearest"] = "trilinear") -> Volume:
    """Resample onto a grid with ``target_spacing_mm``, same physical origin.

    Output dims are ``round(dims * spacing / target)`` (at least 1). Sample
    positions past the input extent are clamped to the border. Label volumes
    only accept ``mode="nearest"``.
    """
    target = _as_spacing(target_spacing_mm)
    if mode not in ("trilinear", "nearest"):
        raise ValidationError(f"unknown interpolation mode {mode!r}")
    is_labels = isinstance(vol, LabelVolume)
    if is_labels and mode != "nearest":
        raise ValidationError("label volumes can only be resampled with nearest-neighbour interpolation")
    if target == vol.spacing_mm:
        if is_labels:
            return LabelVolume(vol.data, target, vol.num_classes)
        return ScalarVolume(vol.data, target, vol.kind_tag)

    new_dims = [max(1, int(np.floor(n * s / t + 0.5))) for n, s, t in zip(vol.dims, vol.spacing_mm, target)]
    coords = [np.arange(m) * t / s for m, s, t in zip(new_dims, vol.spacing_mm, target)]
    if mode == "nearest":
        idx = [np.clip(np.floor(c + 0.5).astype(np.intp), 0, n - 1) for c, n in zip(coords, vol.dims)]
        out = vol.data[np.ix_(*idx)]
    else:
        out = vol.data
        for axis in range(3):
            out = _interp_axis(out, axis, coords[axis])
    if is_labels:
        return LabelVolume(out, target, vol.num_classes)
    return ScalarVolume(out, target, vol.kind_tag)


def _index_coords(field: DeformationField) -> np.ndarray:
    sp = np.asarray(field.spacing_mm)
    idx = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in field.dims], indexing="ij"), axis=-1)
    return idx + field.data / sp


def warp_scalar(vol: ScalarVolume, field: DeformationField, oob_value: float = AIR_HU) -> ScalarVolume:
    """Pull-back warp: ``out(x) = vol(x + f(x))`` with trilinear sampling."""
    _check_same_dims(vol, field, "warp_scalar")
    if not np.any(field.data):
        return ScalarVolume(vol.data, vol.spacing_mm, vol.kind_tag)
    out = sample_trilinear(vol.data, _index_coords(field), oob_value=float(oob_value))
    return ScalarVolume(out, vol.spacing_mm, vol.kind_tag)


def warp_labels(labels: LabelVolume, field: DeformationField) -> LabelVolume:
    """Pull-back warp with nearest-neighbour sampling; outside maps to background."""
    _check_same_dims(labels, field, "warp_labels")
    if not np.any(field.data):
        return LabelVolume(labels.data, labels.spacing_mm, labels.num_classes)
    out = sample_nearest(labels.data, _index_coords(field), oob_value=0)
    return LabelVolume(out, labels.spacing_mm, labels.num_classes)


def sagittal_flip_relabel(scan: ScalarVolume, labels: LabelVolume,
                          table: SwapTable) -> tuple[ScalarVolume, LabelVolume]:
    """Mirror both volumes along x and swap left/right label ids."""
    _check_same_dims(scan, labels, "sagittal_flip_relabel")
    lut = table.lookup(labels.num_classes)
    flipped_scan = ScalarVolume(scan.data[::-1, :, :], scan.spacing_mm, scan.kind_tag)
    flipped_labels = LabelVolume(lut[labels.data[::-1, :, :]], labels.spacing_mm, labels.num_classes)
    return flipped_scan, flipped_labels


def jacobian_determinants(field: DeformationField) -> ScalarVolume:
    """Determinant of ``d(x + f(x))/dx`` per voxel.

    Central differences in the interior, one-sided at the borders.
    """
    if min(field.dims) < 2:
        raise ValidationError("jacobian_determinants needs at least 2 voxels per axis")
    # jac[k][a] = d(x_k + f_k) / d x_a
    jac = [[None] * 3 for _ in range(3)]
    for k in range(3):
        grads = np.gradient(field.data[..., k], *field.spacing_mm, edge_order=1)
        for a in range(3):
            jac[k][a] = grads[a] + (1.0 if k == a else 0.0)
    det = (jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
           - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
           + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]))
    return ScalarVolume(det, field.spacing_mm, "derived")
