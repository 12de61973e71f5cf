"""End-to-end workflow: register, build the model, synthesize samples.

Output layout under ``output_dir``::

    reference/scan.svol, reference/labels.svol   reference pair at target spacing
    fields/NN_<name>.svol                        reference -> subject fields
    model.sdm                                    deformation model
    samples/sample_<seed>_{scan,labels}.svol     synthetic pairs
    manifest.json                                artifacts with SHA-256 hashes

The manifest carries no timestamps, so identical configurations produce
byte-identical output trees.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bonesynth import io
from bonesynth.deformmodel import (
    build_deformation_model,
    read_model,
    sample_weights,
    synthesize_sample,
    write_model,
)
from bonesynth.errors import BonesynthError, ValidationError
from bonesynth.registration import RegistrationConfig, register
from bonesynth.volcore import resample

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
EXTREME_WEIGHT_SIGMAS = 3.0


class PipelineError(BonesynthError):
    """A stage failed; carries the stage name and offending input path."""

    def __init__(self, stage: str, path, cause: Exception):
        self.stage = stage
        self.path = None if path is None else str(path)
        self.cause = cause
        super().__init__(f"stage {stage!r} failed on {self.path}: {cause}")


@dataclass(frozen=True)
class LabelledInput:
    scan: str
    labels: str


@dataclass(frozen=True)
class PipelineConfig:
    reference_path: str
    labelled_paths: tuple[LabelledInput, ...]
    unlabelled_paths: tuple[str, ...] = ()
    target_spacing_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    n_components: int = 8
    n_samples: int = 0
    seed: int = 0
    output_dir: str = "bonesynth_out"

    def __post_init__(self):
        if not self.labelled_paths:
            raise ValidationError("at least one labelled scan (the reference) is required")
        if self.reference_path not in [lp.scan for lp in self.labelled_paths]:
            raise ValidationError("reference_path must be one of the labelled scans")
        if int(self.n_samples) < 0:
            raise ValidationError("n_samples must be >= 0")
        if int(self.n_components) < 1:
            raise ValidationError("n_components must be >= 1")
        sp = tuple(float(s) for s in self.target_spacing_mm)
        if len(sp) != 3 or min(sp) <= 0:
            raise ValidationError("target_spacing_mm must be three positive numbers")
        object.__setattr__(self, "target_spacing_mm", sp)

    @property
    def reference_labels_path(self) -> str:
        return next(lp.labels for lp in self.labelled_paths if lp.scan == self.reference_path)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> PipelineConfig:
        allowed = {"reference_path", "labelled_paths", "unlabelled_paths", "target_spacing_mm",
                   "registration", "n_components", "n_samples", "seed", "output_dir"}
        if not isinstance(doc, dict):
            raise ValidationError("pipeline config must be a JSON object")
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise ValidationError(f"unknown pipeline config keys: {unknown}")
        base = Path(base_dir) if base_dir is not None else None

        def resolve(p) -> str:
            if not isinstance(p, str):
                raise ValidationError(f"expected a path string, got {p!r}")
            return str(base / p) if base is not None and not os.path.isabs(p) else p

        labelled = []
        for entry in doc.get("labelled_paths", []):
            if isinstance(entry, dict):
                scan, labels = entry.get("scan"), entry.get("labels")
            elif isinstance(entry, (list, tuple)) and len(entry) == 2:
                scan, labels = entry
            else:
                raise ValidationError(f"labelled entry must be {{scan, labels}} or a pair: {entry!r}")
            labelled.append(LabelledInput(resolve(scan), resolve(labels)))
        if "reference_path" not in doc:
            raise ValidationError("reference_path is required")
        kwargs = dict(
            reference_path=resolve(doc["reference_path"]),
            labelled_paths=tuple(labelled),
            unlabelled_paths=tuple(resolve(p) for p in doc.get("unlabelled_paths", [])),
            registration=RegistrationConfig.from_dict(doc.get("registration", {})),
        )
        for key in ("target_spacing_mm", "n_components", "n_samples", "seed"):
            if key in doc:
                kwargs[key] = doc[key]
        if "output_dir" in doc:
            kwargs["output_dir"] = resolve(doc["output_dir"])
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> PipelineConfig:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc, base_dir=path.parent)

    def snapshot(self) -> dict:
        return {
            "reference_path": self.reference_path,
            "labelled_paths": [{"scan": lp.scan, "labels": lp.labels} for lp in self.labelled_paths],
            "unlabelled_paths": list(self.unlabelled_paths),
            "target_spacing_mm": list(self.target_spacing_mm),
            "registration": self.registration.to_dict(),
            "n_components": int(self.n_components),
            "n_samples": int(self.n_samples),
            "seed": int(self.seed),
        }


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Manifest:
    def __init__(self, out_dir: Path, cfg: PipelineConfig):
        self.out_dir = out_dir
        self.doc = {"format": "bonesynth-manifest-1", "config": cfg.snapshot(),
                    "status": "running", "artifacts": []}

    def add(self, path: Path, kind: str, stage: str, **extra):
        entry = {"path": path.relative_to(self.out_dir).as_posix(), "kind": kind, "stage": stage,
                 "sha256": sha256_file(path)}
        entry.update(extra)
        self.doc["artifacts"].append(entry)

    def write(self, status: str, failure: dict | None = None) -> dict:
        self.doc["status"] = status
        if failure is not None:
            self.doc["failure"] = failure
        path = self.out_dir / MANIFEST_NAME
        path.write_text(json.dumps(self.doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")
        return self.doc


def _stem(path: str) -> str:
    name = Path(path).name
    return name[:-5] if name.endswith(".svol") else Path(path).stem


def run_pipeline(cfg: PipelineConfig, threads: int | None = None) -> dict:
    """Run every stage and return the manifest written to ``output_dir``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest(out, cfg)
    workers = max(1, threads or os.cpu_count() or 1)
    stage, current = "load", cfg.reference_path

    try:
        ref_scan = resample(io.read_scan(cfg.reference_path), cfg.target_spacing_mm, "trilinear")
        current = cfg.reference_labels_path
        ref_labels = resample(io.read_labels(current), cfg.target_spacing_mm, "nearest")
        if ref_labels.dims != ref_scan.dims:
            raise ValidationError("reference scan and labels differ in dims")
        for lp in cfg.labelled_paths:
            if lp.scan != cfg.reference_path:
                current = lp.labels
                io.read_labels(lp.labels)
        moving_paths = [lp.scan for lp in cfg.labelled_paths if lp.scan != cfg.reference_path]
        moving_paths += list(cfg.unlabelled_paths)
        moving = []
        for p in moving_paths:
            current = p
            moving.append(resample(io.read_scan(p), cfg.target_spacing_mm, "trilinear"))
        for name, vol in (("scan", ref_scan), ("labels", ref_labels)):
            path = io.write_svol(out / "reference" / f"{name}.svol", vol)
            manifest.add(path, "labels" if name == "labels" else "scan", stage, source=(
                cfg.reference_labels_path if name == "labels" else cfg.reference_path))

        stage = "register"
        logger.info("registering %d scans to the reference", len(moving))

        def job(i):
            try:
                return register(ref_scan, moving[i], cfg.registration)
            except Exception as exc:
                raise PipelineError(stage, moving_paths[i], exc) from exc

        with ThreadPoolExecutor(max_workers=workers) as pool:
            fields = list(pool.map(job, range(len(moving))))
        field_paths = []
        for i, (p, f) in enumerate(zip(moving_paths, fields)):
            path = io.write_svol(out / "fields" / f"{i:02d}_{_stem(p)}.svol", f)
            manifest.add(path, "field", stage, source=p)
            field_paths.append(path)

        stage, current = "build-model", str(out / "fields")
        stored = [io.read_field(p) for p in field_paths]
        model_path = write_model(out / "model.sdm", build_deformation_model(stored, cfg.n_components))
        manifest.add(model_path, "model", stage)
        model = read_model(model_path)

        stage, current = "sample", str(model_path)
        seeds = [int(cfg.seed) + j for j in range(int(cfg.n_samples))]

        def synth(seed):
            draw = sample_weights(model, seed)
            warn_extreme_weights(model, draw)
            return synthesize_sample(model, ref_scan, ref_labels, draw)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(synth, seeds))
        for seed, (scan, labels) in zip(seeds, samples):
            for name, vol in (("scan", scan), ("labels", labels)):
                path = io.write_svol(out / "samples" / f"sample_{seed}_{name}.svol", vol)
                manifest.add(path, "labels" if name == "labels" else "scan", stage, seed=seed)
    except PipelineError as exc:
        manifest.write("failed", {"stage": exc.stage, "path": exc.path, "error": str(exc.cause)})
        raise
    except Exception as exc:
        manifest.write("failed", {"stage": stage, "path": current, "error": str(exc)})
        raise PipelineError(stage, current, exc) from exc
    return manifest.write("ok")


def warn_extreme_weights(model, draw) -> bool:
    lam = model.eigenvalues[: draw.component_count]
    bound = EXTREME_WEIGHT_SIGMAS * np.sqrt(lam)
    extreme = np.abs(draw.weights) > bound
    if np.any(extreme):
        logger.warning("seed %s: weights %s exceed %.0f standard deviations", draw.seed,
                       np.flatnonzero(extreme).tolist(), EXTREME_WEIGHT_SIGMAS)
    return bool(np.any(extreme))
