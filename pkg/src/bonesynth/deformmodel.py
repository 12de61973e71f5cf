"""Statistical deformation model: PCA over dense displacement fields.

Fields are flattened in file order (x fastest, three interleaved components
per voxel). New fields are the mean plus a weighted sum of principal
components, with weights drawn from N(0, eigenvalue).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bonesynth import rng
from bonesynth.errors import ValidationError
from bonesynth.volcore import (
    AIR_HU,
    DeformationField,
    LabelVolume,
    ScalarVolume,
    Triple,
    warp_labels,
    warp_scalar,
)

MAGIC = "SDM1"
# Gaussian draws for model weights use this RNG stream.
WEIGHT_STREAM = 0


def flatten_field(field: DeformationField) -> np.ndarray:
    return field.data.transpose(2, 1, 0, 3).reshape(-1)


def unflatten_field(vec: np.ndarray, dims, spacing_mm) -> DeformationField:
    nx, ny, nz = dims
    return DeformationField(np.asarray(vec).reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3), spacing_mm)


@dataclass(frozen=True)
class DeformationModel:
    """Mean field, orthonormal components (rows) and descending eigenvalues."""

    field_dims: tuple[int, int, int]
    spacing_mm: Triple
    mean_field: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    n_training: int

    def __post_init__(self):
        dims = tuple(int(d) for d in self.field_dims)
        size = 3 * int(np.prod(dims))
        mean = np.array(self.mean_field, dtype=np.float64).reshape(-1)
        comps = np.array(self.components, dtype=np.float64).reshape(-1, size)
        eig = np.array(self.eigenvalues, dtype=np.float64).reshape(-1)
        if mean.size != size:
            raise ValidationError(f"mean field has {mean.size} entries, expected {size}")
        if comps.shape[0] != eig.size:
            raise ValidationError("one eigenvalue per component required")
        if np.any(eig < 0) or np.any(np.diff(eig) > 0):
            raise ValidationError("eigenvalues must be non-negative and descending")
        if int(self.n_training) < 2 or eig.size > int(self.n_training) - 1:
            raise ValidationError("component count exceeds the rank bound n_training - 1")
        for arr in (mean, comps, eig):
            arr.flags.writeable = False
        object.__setattr__(self, "field_dims", dims)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "mean_field", mean)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "eigenvalues", eig)
        object.__setattr__(self, "n_training", int(self.n_training))

    @property
    def n_components(self) -> int:
        return int(self.eigenvalues.size)

    def project(self, field: DeformationField) -> np.ndarray:
        """Weights of ``field - mean`` on every retained component."""
        if field.dims != self.field_dims:
            raise ValidationError(f"field dims {field.dims} != model dims {self.field_dims}")
        return self.components @ (flatten_field(field) - self.mean_field)


@dataclass(frozen=True)
class SampleDraw:
    weights: np.ndarray
    seed: int | None
    component_count: int

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if w.size != int(self.component_count):
            raise ValidationError("weights length must equal component_count")
        if not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "component_count", int(self.component_count))


def build_deformation_model(fields: list[DeformationField], n_components: int) -> DeformationModel:
    """PCA of the flattened fields via SVD of the mean-centred data matrix.

    Eigenvalues use the sample-covariance convention ``s**2 / (n - 1)`` and at
    most ``n - 1`` components are kept. Each component's sign is fixed so that
    its largest-magnitude entry is positive.
    """
    if len(fields) < 2:
        raise ValidationError("at least two fields are needed to build a model")
    if int(n_components) < 1:
        raise ValidationError("n_components must be >= 1")
    dims, spacing = fields[0].dims, fields[0].spacing_mm
    for f in fields[1:]:
        if f.dims != dims or f.spacing_mm != spacing:
            raise ValidationError("all fields must share dims and spacing")
    n = len(fields)
    data = np.stack([flatten_field(f) for f in fields])
    mean = data.mean(axis=0)
    centred = data - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    keep = min(int(n_components), n - 1)
    s, vt = s[:keep], vt[:keep]
    # singular values at round-off level of the data are exact zeros
    scale = np.linalg.norm(data)
    s = np.where(s <= 1e-12 * scale, 0.0, s)
    pivot = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(keep), pivot])
    vt = vt * np.where(signs == 0, 1.0, signs)[:, None]
    eig = s**2 / (n - 1)
    return DeformationModel(dims, spacing, mean, vt, eig, n)


def sample_weights(model: DeformationModel, seed: int, component_count: int | None = None) -> SampleDraw:
    """Independent ``w_i ~ N(0, lambda_i)`` from the counter-based generator."""
    k = model.n_components if component_count is None else int(component_count)
    if not 0 <= k <= model.n_components:
        raise ValidationError(f"component_count must lie in [0, {model.n_components}], got {k}")
    lam = model.eigenvalues[:k]
    z = rng.standard_normal(seed, WEIGHT_STREAM, k)
    w = np.where(lam > 0, np.sqrt(lam) * z, 0.0)
    return SampleDraw(w, int(seed), k)


def synthesize_field(model: DeformationModel, draw: SampleDraw) -> DeformationField:
    """``mean + sum_i w_i v_i`` reshaped to the model grid."""
    if draw.component_count > model.n_components:
        raise ValidationError("draw uses more components than the model holds")
    vec = model.mean_field + draw.weights @ model.components[: draw.component_count]
    return unflatten_field(vec, model.field_dims, model.spacing_mm)


def synthesize_sample(model: DeformationModel, ref_scan: ScalarVolume, ref_labels: LabelVolume,
                      draw: SampleDraw) -> tuple[ScalarVolume, LabelVolume]:
    """Warp the reference pair by one sampled field."""
    if ref_scan.dims != model.field_dims or ref_labels.dims != model.field_dims:
        raise ValidationError(
            f"reference dims {ref_scan.dims}/{ref_labels.dims} != model dims {model.field_dims}"
        )
    field = synthesize_field(model, draw)
    return warp_scalar(ref_scan, field, AIR_HU), warp_labels(ref_labels, field)


def encode_model(model: DeformationModel) -> bytes:
    head = {
        "magic": MAGIC,
        "dims": list(model.field_dims),
        "spacing_mm": list(model.spacing_mm),
        "n_components": model.n_components,
        "n_training": model.n_training,
    }
    return b"".join([
        (json.dumps(head) + "\n").encode("utf-8"),
        model.mean_field.astype("<f4").tobytes(),
        model.components.astype("<f4").tobytes(),
        model.eigenvalues.astype("<f8").tobytes(),
    ])


def decode_model(blob: bytes) -> DeformationModel:
    nl = blob.find(b"\n")
    try:
        head = json.loads(blob[:nl].decode("utf-8")) if nl >= 0 else None
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"SDM1: unreadable header ({exc})") from exc
    if not isinstance(head, dict) or head.get("magic") != MAGIC:
        raise ValidationError("SDM1: bad magic")
    dims = tuple(int(d) for d in head["dims"])
    k = int(head["n_components"])
    size = 3 * int(np.prod(dims))
    body = blob[nl + 1:]
    expected = 4 * size * (1 + k) + 8 * k
    if len(body) != expected:
        raise ValidationError(f"SDM1: expected {expected} data bytes, found {len(body)}")
    f32 = np.frombuffer(body, dtype="<f4", count=size * (1 + k)).astype(np.float64)
    eig = np.frombuffer(body, dtype="<f8", offset=4 * size * (1 + k), count=k)
    return DeformationModel(dims, head["spacing_mm"], f32[:size], f32[size:].reshape(k, size),
                            eig, head["n_training"])


def write_model(path, model: DeformationModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_model(model))
    return path


def read_model(path) -> DeformationModel:
    return decode_model(Path(path).read_bytes())
