"""Write a phantom suite and a matching pipeline config to disk."""

from __future__ import annotations

import json
from pathlib import Path

from bonesynth import io
from bonesynth.phantom import phantom_suite
from bonesynth.registration import RegistrationConfig


def write_phantom_suite(out_dir, n_copies: int = 4, size: int = 48, seed: int = 0,
                        n_samples: int = 4) -> Path:
    """Reference and deformed copies; the second half of the copies is left unlabelled."""
    out = Path(out_dir)
    (ref_scan, ref_labels), copies = phantom_suite((size,) * 3, n_copies=n_copies, seed=seed)
    io.write_svol(out / "ref_scan.svol", ref_scan)
    io.write_svol(out / "ref_labels.svol", ref_labels)
    labelled = [{"scan": "ref_scan.svol", "labels": "ref_labels.svol"}]
    unlabelled = []
    n_labelled = (n_copies + 1) // 2
    for i, (scan, labels, _) in enumerate(copies):
        io.write_svol(out / f"copy{i}_scan.svol", scan)
        if i < n_labelled:
            io.write_svol(out / f"copy{i}_labels.svol", labels)
            labelled.append({"scan": f"copy{i}_scan.svol", "labels": f"copy{i}_labels.svol"})
        else:
            unlabelled.append(f"copy{i}_scan.svol")
    cfg = {
        "reference_path": "ref_scan.svol",
        "labelled_paths": labelled,
        "unlabelled_paths": unlabelled,
        "target_spacing_mm": [2.0, 2.0, 2.0],
        "registration": RegistrationConfig().to_dict(),
        "n_components": n_copies - 1,
        "n_samples": n_samples,
        "seed": seed,
        "output_dir": "run",
    }
    path = out / "pipeline.json"
    path.write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
    return path
