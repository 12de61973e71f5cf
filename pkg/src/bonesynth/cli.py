"""Command-line entry point.

Exit codes: 0 on success, 2 on invalid input, 1 on any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from bonesynth import io
from bonesynth.deformmodel import (
    build_deformation_model,
    read_model,
    sample_weights,
    synthesize_sample,
    write_model,
)
from bonesynth.errors import ValidationError
from bonesynth.patchsample import BalancedSampler, as_size, uniform_patch
from bonesynth.pipeline import PipelineConfig, PipelineError, run_pipeline, warn_extreme_weights
from bonesynth.registration import RegistrationConfig, register
from bonesynth.segmetrics import evaluation_report
from bonesynth.volcore import SwapTable, sagittal_flip_relabel

logger = logging.getLogger("bonesynth")


def _cmd_register(args) -> None:
    cfg = RegistrationConfig.from_json(args.config) if args.config else RegistrationConfig()
    field = register(io.read_scan(args.fixed), io.read_scan(args.moving), cfg)
    io.write_svol(args.out, field)


def _cmd_build_model(args) -> None:
    paths = sorted(Path(args.fields).glob("*.svol"))
    if len(paths) < 2:
        raise ValidationError(f"{args.fields}: need at least two .svol fields")
    model = build_deformation_model([io.read_field(p) for p in paths], args.n_components)
    write_model(args.out, model)
    logger.info("model with %d components from %d fields", model.n_components, len(paths))


def _cmd_sample(args) -> None:
    if args.n < 0:
        raise ValidationError("--n must be >= 0")
    model = read_model(args.model)
    scan, labels = io.read_scan(args.ref_scan), io.read_labels(args.ref_labels)
    out = Path(args.out)
    for seed in range(args.seed, args.seed + args.n):
        draw = sample_weights(model, seed)
        warn_extreme_weights(model, draw)
        s, lab = synthesize_sample(model, scan, labels, draw)
        io.write_svol(out / f"sample_{seed}_scan.svol", s)
        io.write_svol(out / f"sample_{seed}_labels.svol", lab)


def _cmd_flip(args) -> None:
    table = SwapTable.from_csv(args.swap_table) if args.swap_table else SwapTable.upper_body()
    scan, labels = sagittal_flip_relabel(io.read_scan(args.scan), io.read_labels(args.labels), table)
    io.write_svol(f"{args.out_prefix}_scan.svol", scan)
    io.write_svol(f"{args.out_prefix}_labels.svol", labels)


def _cmd_patches(args) -> None:
    if args.n < 0:
        raise ValidationError("--n must be >= 0")
    labels = io.read_labels(args.labels)
    size = as_size(args.size[0] if len(args.size) == 1 else args.size)
    if args.mode == "balanced":
        sampler = BalancedSampler(labels, size)
        draw = sampler.draw
    else:
        def draw(seed):
            return uniform_patch(labels.dims, size, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        for seed in range(args.seed, args.seed + args.n):
            fh.write(json.dumps(draw(seed).to_record()) + "\n")


def _cmd_evaluate(args) -> None:
    report = evaluation_report(io.read_labels(args.pred), io.read_labels(args.gt),
                               drop_zeros=args.drop_zeros, dice_reduction=args.dice_reduction)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")


def _cmd_pipeline(args) -> None:
    manifest = run_pipeline(PipelineConfig.from_json(args.config), threads=args.threads)
    logger.info("pipeline finished: %d artifacts", len(manifest["artifacts"]))


def _cmd_make_phantoms(args) -> None:
    from bonesynth.demo import write_phantom_suite

    cfg_path = write_phantom_suite(args.out, n_copies=args.copies, size=args.size, seed=args.seed)
    print(cfg_path)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="bonesynth", parents=[common],
                                     description="Synthetic labelled CT data from deformation models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", parents=[common], help="register a moving scan to a fixed scan")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--config", help="RegistrationConfig JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("build-model", parents=[common], help="PCA model from a directory of fields")
    p.add_argument("--fields", required=True)
    p.add_argument("--n-components", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_model)

    p = sub.add_parser("sample", parents=[common], help="synthesize labelled samples")
    p.add_argument("--model", required=True)
    p.add_argument("--ref-scan", required=True)
    p.add_argument("--ref-labels", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("flip", parents=[common], help="sagittal flip with left/right relabelling")
    p.add_argument("--scan", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--swap-table", help="CSV of left,right pairs (default: upper-body table)")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=_cmd_flip)

    p = sub.add_parser("patches", parents=[common], help="draw patch locations as JSON lines")
    p.add_argument("--labels", required=True)
    p.add_argument("--size", type=int, nargs="+", required=True)
    p.add_argument("--mode", choices=("uniform", "balanced"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_patches)

    p = sub.add_parser("evaluate", parents=[common], help="Dice report for a predicted label volume")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--drop-zeros", action="store_true")
    p.add_argument("--dice-reduction", choices=("mean", "sum"), default="mean")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("pipeline", parents=[common], help="run the full workflow from a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("make-phantoms", parents=[common], help="write a synthetic phantom suite")
    p.add_argument("--out", required=True)
    p.add_argument("--copies", type=int, default=4)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_make_phantoms)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.threads = getattr(args, "threads", None) or os.cpu_count() or 1
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc.cause, ValidationError) else 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
