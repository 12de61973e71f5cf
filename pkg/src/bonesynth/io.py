"""SVOL1 volume container.

One UTF-8 JSON header line terminated by ``\\n``::

    {"magic": "SVOL1", "kind": "scan" | "labels" | "field", "dtype": "f32" | "u16",
     "dims": [x, y, z], "spacing_mm": [sx, sy, sz], "num_classes": N}

followed by raw little-endian voxel data, x fastest. ``num_classes`` is only
present for label volumes. Fields store three interleaved f32 components per
voxel.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from bonesynth.errors import ValidationError
from bonesynth.volcore import DeformationField, LabelVolume, ScalarVolume

MAGIC = "SVOL1"

AnyVolume = Union[ScalarVolume, LabelVolume, DeformationField]


def _header(kind: str, dtype: str, dims, spacing, num_classes=None) -> bytes:
    head = {
        "magic": MAGIC,
        "kind": kind,
        "dtype": dtype,
        "dims": [int(d) for d in dims],
        "spacing_mm": [float(s) for s in spacing],
    }
    if num_classes is not None:
        head["num_classes"] = int(num_classes)
    return (json.dumps(head) + "\n").encode("utf-8")


def encode_svol(vol: AnyVolume) -> bytes:
    if isinstance(vol, LabelVolume):
        if vol.num_classes > 65536:
            raise ValidationError("u16 label storage supports at most 65536 classes")
        head = _header("labels", "u16", vol.dims, vol.spacing_mm, vol.num_classes)
        body = vol.data.astype("<u2").ravel(order="F").tobytes()
    elif isinstance(vol, ScalarVolume):
        head = _header("scan", "f32", vol.dims, vol.spacing_mm)
        body = vol.data.astype("<f4").ravel(order="F").tobytes()
    elif isinstance(vol, DeformationField):
        head = _header("field", "f32", vol.dims, vol.spacing_mm)
        body = vol.data.transpose(3, 0, 1, 2).astype("<f4").ravel(order="F").tobytes()
    else:
        raise TypeError(f"cannot encode {type(vol).__name__}")
    return head + body


def decode_svol(blob: bytes) -> AnyVolume:
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValidationError("SVOL1: missing header line")
    try:
        head = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"SVOL1: unreadable header ({exc})") from exc
    if not isinstance(head, dict) or head.get("magic") != MAGIC:
        raise ValidationError("SVOL1: bad magic")
    kind, dtype = head.get("kind"), head.get("dtype")
    dims = tuple(int(d) for d in head.get("dims", ()))
    spacing = head.get("spacing_mm")
    if len(dims) != 3 or min(dims) < 1:
        raise ValidationError(f"SVOL1: invalid dims {head.get('dims')!r}")
    expected = {"scan": "f32", "labels": "u16", "field": "f32"}
    if kind not in expected or dtype != expected[kind]:
        raise ValidationError(f"SVOL1: unsupported kind/dtype {kind!r}/{dtype!r}")
    n_vox = dims[0] * dims[1] * dims[2]
    body = blob[nl + 1:]
    np_dtype = np.dtype("<u2") if dtype == "u16" else np.dtype("<f4")
    n_vals = n_vox * (3 if kind == "field" else 1)
    if len(body) != n_vals * np_dtype.itemsize:
        raise ValidationError(
            f"SVOL1: expected {n_vals * np_dtype.itemsize} data bytes, found {len(body)}"
        )
    raw = np.frombuffer(body, dtype=np_dtype)
    if kind == "labels":
        if "num_classes" not in head:
            raise ValidationError("SVOL1: labels header lacks num_classes")
        return LabelVolume(raw.reshape(dims, order="F"), spacing, head["num_classes"])
    if kind == "scan":
        return ScalarVolume(raw.reshape(dims, order="F").astype(np.float64), spacing)
    comp = raw.reshape((3, *dims), order="F").transpose(1, 2, 3, 0)
    return DeformationField(comp.astype(np.float64), spacing)


def write_svol(path, vol: AnyVolume) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_svol(vol))
    return path


def read_svol(path) -> AnyVolume:
    return decode_svol(Path(path).read_bytes())


def read_scan(path) -> ScalarVolume:
    vol = read_svol(path)
    if not isinstance(vol, ScalarVolume):
        raise ValidationError(f"{path}: expected a scan volume")
    return vol


def read_labels(path) -> LabelVolume:
    vol = read_svol(path)
    if not isinstance(vol, LabelVolume):
        raise ValidationError(f"{path}: expected a label volume")
    return vol


def read_field(path) -> DeformationField:
    vol = read_svol(path)
    if not isinstance(vol, DeformationField):
        raise ValidationError(f"{path}: expected a deformation field")
    return vol
