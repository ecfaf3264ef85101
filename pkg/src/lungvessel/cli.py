"""Command-line interface.

Subcommands mirror the pipeline stages plus phantom generation and
evaluation. All artifacts land in --output; single-stage runs produce files
byte-identical to the same stage inside `pipeline`.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import pipeline as pl
from .config import PipelineConfig, load_config, serialize_config
from .metrics import EvalReport, jaccard, roc_az, sens_spec
from .phantom import BUNDLED_SPECS, load_phantom_spec
from .pipeline import StageError
from .volume import LabelVolume, load_metaimage

CONFIG_EXIT = 2


def _common(sub, seed_help):
    sub.add_argument("--output", required=True, help="output directory")
    sub.add_argument("--config", help="config file (key = value lines)")
    sub.add_argument("--threads", type=int, default=0,
                     help="worker cap; results are identical for any value")
    sub.add_argument("--seed", help=seed_help)
    sub.add_argument("--flip-lr", action="store_true",
                     help="flip the left/right labeling convention")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lungvessel",
        description="Pulmonary vessel segmentation toolkit")
    sp = p.add_subparsers(dest="command", required=True)

    pipe = sp.add_parser("pipeline", help="run all stages on a CT volume")
    pipe.add_argument("input", help="input volume (.mhd)")
    _common(pipe, "airway seed voxel i,j,k (default: detect)")
    pipe.add_argument("--heart", help="heart center voxel i,j,k "
                                      "(default: detect)")

    for name, help_text in (("airway", "trachea seed voxel i,j,k"),
                            ("lungs", None),
                            ("vesselness", None),
                            ("centerline", "heart center voxel i,j,k"),
                            ("segment", None)):
        sub = sp.add_parser(name, help=f"run the {name} stage")
        sub.add_argument("input", help="input volume (.mhd)")
        _common(sub, help_text or "unused for this stage")

    tort = sp.add_parser("tortuosity", help="distance-metric report from a "
                                            "centerline")
    tort.add_argument("centerline", help="centerline.json")
    _common(tort, "unused for this stage")

    ph = sp.add_parser("phantom", help="generate a phantom, optionally with "
                                       "a noise-robustness sweep")
    ph.add_argument("spec", nargs="?", help="phantom spec JSON")
    ph.add_argument("--preset", choices=sorted(BUNDLED_SPECS),
                    help="bundled phantom instead of a spec file")
    ph.add_argument("--noise-sweep",
                    help="comma list of Gaussian noise stds (HU); runs the "
                         "vessel chain end-to-end per level")
    _common(ph, "unused for this command")

    ev = sp.add_parser("evaluate", help="evaluate a segmentation or scored "
                                        "points")
    ev.add_argument("--prediction", help="predicted vessel mask (.mhd)")
    ev.add_argument("--truth", help="ground-truth mask (.mhd)")
    ev.add_argument("--response", help="response volume for point scoring")
    ev.add_argument("--points", help="annotated points CSV: x,y,z,label")
    _common(ev, "unused for this command")
    return p


def _load_cfg(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    if getattr(args, "flip_lr", False):
        cfg.flip_lr = True
    return cfg


def _read_points_csv(path: str, dims):
    coords = []
    labels = []
    with open(path) as fh:
        rows = [line.strip() for line in fh if line.strip()]
    start = 0
    if rows and not rows[0].replace(",", "").replace(".", "").replace(
            "-", "").replace(" ", "").isdigit():
        start = 1  # header row
    for n, row in enumerate(rows[start:], start=start + 1):
        parts = [s.strip() for s in row.split(",")]
        if len(parts) < 4:
            raise ValueError(f"points row {n}: expected x,y,z,label")
        x, y, z = (int(float(v)) for v in parts[:3])
        if not (0 <= x < dims[0] and 0 <= y < dims[1] and 0 <= z < dims[2]):
            raise ValueError(f"points row {n}: coordinate ({x},{y},{z}) out "
                             f"of bounds for dims {tuple(dims)}")
        coords.append((x, y, z))
        labels.append(int(parts[3]) != 0)
    return np.array(coords, int), np.array(labels, bool)


def cmd_evaluate(args) -> int:
    os.makedirs(args.output, exist_ok=True)
    report = EvalReport()
    if args.prediction and args.truth:
        pred = load_metaimage(args.prediction)
        truth = load_metaimage(args.truth)
        if pred.dims != truth.dims:
            print(f"error: dims differ: {pred.dims} vs {truth.dims}",
                  file=sys.stderr)
            return 1
        report.jaccard = jaccard(pred.data > 0, truth.data > 0)
    if args.points:
        source = args.response or args.prediction
        if source is None:
            print("error: --points needs --response or --prediction",
                  file=sys.stderr)
            return 1
        vol = load_metaimage(source)
        coords, labels = _read_points_csv(args.points, vol.dims)
        scores = vol.data[coords[:, 0], coords[:, 1], coords[:, 2]].astype(
            np.float64)
        report.az, _ = roc_az(scores, labels)
        if args.prediction:
            pv = load_metaimage(args.prediction)
            pred_pts = pv.data[coords[:, 0], coords[:, 1], coords[:, 2]] > 0
            report.sensitivity, report.specificity = sens_spec(pred_pts,
                                                               labels)
    if report.jaccard is None and report.az is None:
        print("error: nothing to evaluate (give --prediction/--truth or "
              "--points)", file=sys.stderr)
        return 1
    with open(os.path.join(args.output, "evaluation.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(args.output, "evaluation.txt"), "w") as fh:
        fh.write(report.to_table())
    print(report.to_table(), end="")
    return 0


def cmd_phantom(args, cfg: PipelineConfig) -> int:
    if args.preset:
        spec = BUNDLED_SPECS[args.preset]()
    elif args.spec:
        spec = load_phantom_spec(args.spec)
    else:
        print("error: give a spec file or --preset", file=sys.stderr)
        return 1
    os.makedirs(args.output, exist_ok=True)
    if args.noise_sweep:
        stds = [float(v) for v in args.noise_sweep.split(",")]
        rows = pl.run_noise_sweep(spec, args.output, cfg, stds)
        for std, jac in rows:
            print(f"noise_std_hu={std:g} jaccard={jac:.4f}")
    else:
        from .phantom import build_phantom
        from .volume import save_metaimage
        from .centerline import trees_to_json
        result = build_phantom(spec)
        save_metaimage(result.volume, os.path.join(args.output, "phantom.mhd"))
        save_metaimage(result.truth, os.path.join(args.output, "truth.mhd"))
        lines = {"centerlines_mm": [c.tolist() for c in result.centerlines]}
        with open(os.path.join(args.output, "truth_centerline.json"),
                  "w") as fh:
            json.dump(lines, fh, indent=1)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_cfg(args)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_EXIT

    try:
        if args.command == "pipeline":
            os.makedirs(args.output, exist_ok=True)
            pl.run_pipeline(args.input, args.output, cfg, seed=args.seed,
                            heart=args.heart)
        elif args.command == "airway":
            os.makedirs(args.output, exist_ok=True)
            pl.stage_airway(args.input, args.output, cfg, seed=args.seed)
        elif args.command == "lungs":
            os.makedirs(args.output, exist_ok=True)
            pl.stage_lungs(args.input, args.output, cfg)
        elif args.command == "vesselness":
            os.makedirs(args.output, exist_ok=True)
            pl.stage_vesselness(args.input, args.output, cfg)
        elif args.command == "centerline":
            os.makedirs(args.output, exist_ok=True)
            pl.stage_centerline(args.input, args.output, cfg,
                                heart=args.seed)
        elif args.command == "segment":
            os.makedirs(args.output, exist_ok=True)
            pl.stage_segment(args.input, args.output, cfg)
        elif args.command == "tortuosity":
            os.makedirs(args.output, exist_ok=True)
            pl.stage_tortuosity(args.output, cfg,
                                centerline_path=args.centerline)
        elif args.command == "phantom":
            return cmd_phantom(args, cfg)
        elif args.command == "evaluate":
            return cmd_evaluate(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
