"""File-based pipeline stages and the one-shot runner.

Every stage reads its inputs from files and writes its artifacts to the
output directory, so running a single stage produces byte-identical files to
the same stage inside the full pipeline. Stage failures raise StageError
carrying the stage name; the CLI maps them to distinct exit codes.
"""

from __future__ import annotations

import json
import os
import time

import numpy as np

from . import airway as airway_mod
from . import centerline as cl
from . import lungs as lungs_mod
from . import metrics as metrics_mod
from . import phantom as phantom_mod
from . import vesselseg
from .airway import LEFT_LABEL
from .config import PipelineConfig, serialize_config
from .medialness import FilterConfig, MedialnessField, run_filter
from .volume import LabelVolume, Volume3D, load_metaimage, save_metaimage

STAGE_EXIT_CODES = {
    "input": 10,
    "airway": 11,
    "lungs": 12,
    "vesselness": 13,
    "centerline": 14,
    "segment": 15,
    "tortuosity": 16,
}


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.exit_code = STAGE_EXIT_CODES.get(stage, 1)


def _require(path: str, stage: str, hint: str):
    if not os.path.exists(path):
        raise StageError(stage, f"missing prerequisite {path} ({hint})")
    return path


def _load_volume(path: str, stage: str) -> Volume3D:
    try:
        vol = load_metaimage(path)
    except (OSError, ValueError) as exc:
        raise StageError(stage, f"cannot read {path}: {exc}") from exc
    if isinstance(vol, LabelVolume):
        raise StageError(stage, f"{path} holds labels, expected intensities")
    return vol


def _load_labels(path: str, stage: str, hint: str) -> LabelVolume:
    _require(path, stage, hint)
    vol = load_metaimage(path)
    if not isinstance(vol, LabelVolume):
        raise StageError(stage, f"{path} is not a label volume")
    return vol


def _parse_point(text):
    if text is None:
        return None
    parts = [int(v) for v in str(text).replace(" ", "").split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected i,j,k point, got {text!r}")
    return tuple(parts)


def air_reference_for(cfg: PipelineConfig, vol: Volume3D, region=None) -> float:
    if cfg.air_reference_hu == "auto":
        return vesselseg.parenchyma_reference(vol, region)
    return float(cfg.air_reference_hu)


# -- stages ------------------------------------------------------------------

def stage_airway(vol_path: str, outdir: str, cfg: PipelineConfig,
                 seed=None) -> None:
    vol = _load_volume(vol_path, "airway")
    try:
        seed = _parse_point(seed) or airway_mod.detect_trachea_seed(vol)
        params = airway_mod.GrowParams.from_seed(
            vol, seed, step=cfg.grow_step_hu, leak_factor=cfg.leak_factor,
            max_iterations=cfg.grow_max_iterations)
        grown = airway_mod.grow_airway(vol, params)
        tree = airway_mod.skeletonize_and_label(
            grown.mask, vol.spacing, vol.origin, flip_lr=cfg.flip_lr)
    except ValueError as exc:
        raise StageError("airway", str(exc)) from exc
    save_metaimage(tree.mask, os.path.join(outdir, "airway.mhd"))
    with open(os.path.join(outdir, "airway_trace.csv"), "w") as fh:
        fh.write("t,th_min,th_max,V_t,E_t\n")
        for t, lo, hi, total, edge in grown.trace:
            fh.write("%d,%.6g,%.6g,%d,%d\n" % (t, lo, hi, total, edge))
    summary = {
        "seed": list(seed),
        "carina": list(int(v) for v in tree.carina),
        "leaked": grown.leaked,
        "leak_iteration": grown.leak_iteration,
        "voxels": int((tree.mask.data > 0).sum()),
    }
    with open(os.path.join(outdir, "airway_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)


def stage_lungs(vol_path: str, outdir: str, cfg: PipelineConfig,
                airway_path: str | None = None) -> None:
    vol = _load_volume(vol_path, "lungs")
    airway_path = airway_path or os.path.join(outdir, "airway.mhd")
    airway_labels = _load_labels(airway_path, "lungs",
                                 "run the airway stage first")
    try:
        coarse = lungs_mod.coarse_lung_mask(vol, cfg.otsu_bins,
                                            exclude=airway_labels.data > 0)
        cost = lungs_mod.build_cost_field(vol, coarse, airway_labels.data > 0)
        split = lungs_mod.split_lungs(cost, airway_labels)
        refined = lungs_mod.refine_lungs(split, airway_labels.data > 0,
                                         cfg.closing_iterations)
    except ValueError as exc:
        raise StageError("lungs", str(exc)) from exc
    save_metaimage(refined.labels, os.path.join(outdir, "lungs.mhd"))
    summary = {
        "counts": {str(k): v for k, v in refined.counts.items()},
        "bboxes": {str(k): v for k, v in refined.bboxes.items()},
        "unreachable": refined.unreachable,
    }
    with open(os.path.join(outdir, "lungs_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)


def _medialness_paths(outdir: str) -> dict:
    return {
        "response": os.path.join(outdir, "medialness.mhd"),
        "radius": os.path.join(outdir, "medialness_radius.mhd"),
        "scale": os.path.join(outdir, "medialness_scale.mhd"),
        "dir": [os.path.join(outdir, f"medialness_dir_{ax}.mhd")
                for ax in "xyz"],
    }


def stage_vesselness(vol_path: str, outdir: str, cfg: PipelineConfig,
                     lungs_path: str | None = None,
                     airway_path: str | None = None) -> None:
    vol = _load_volume(vol_path, "vesselness")
    lungs_path = lungs_path or os.path.join(outdir, "lungs.mhd")
    airway_path = airway_path or os.path.join(outdir, "airway.mhd")
    lung_labels = _load_labels(lungs_path, "vesselness",
                               "run the lungs stage first")
    airway_labels = _load_labels(airway_path, "vesselness",
                                 "run the airway stage first")
    try:
        field = run_filter(vol, lung_labels, airway_labels.data > 0,
                           cfg.filter_config(), tile_z=cfg.tile_z)
    except ValueError as exc:
        raise StageError("vesselness", str(exc)) from exc
    paths = _medialness_paths(outdir)
    save_metaimage(Volume3D(field.response, vol.spacing, vol.origin),
                   paths["response"])
    save_metaimage(LabelVolume(field.radius_index, vol.spacing, vol.origin,
                               {i: f"radius_{r:g}" for i, r in
                                enumerate(cfg.radii)}),
                   paths["radius"])
    save_metaimage(LabelVolume(field.scale_index, vol.spacing, vol.origin,
                               {i: f"scale_{i}" for i in range(cfg.n_scales)}),
                   paths["scale"])
    for c, p in enumerate(paths["dir"]):
        save_metaimage(Volume3D(np.ascontiguousarray(field.direction[..., c]),
                                vol.spacing, vol.origin), p)


def load_medialness(outdir: str, cfg: PipelineConfig, stage: str
                    ) -> MedialnessField:
    paths = _medialness_paths(outdir)
    _require(paths["response"], stage, "run the vesselness stage first")
    resp = load_metaimage(paths["response"])
    radius = load_metaimage(paths["radius"])
    scale = load_metaimage(paths["scale"])
    direction = np.stack([load_metaimage(p).data for p in paths["dir"]],
                         axis=-1)
    return MedialnessField(resp.data, scale.data.astype(np.uint8),
                           radius.data.astype(np.uint8), direction,
                           cfg.filter_config(), resp.spacing, resp.origin)


def stage_centerline(vol_path: str, outdir: str, cfg: PipelineConfig,
                     lungs_path: str | None = None,
                     airway_path: str | None = None,
                     heart=None) -> None:
    vol = _load_volume(vol_path, "centerline")
    lungs_path = lungs_path or os.path.join(outdir, "lungs.mhd")
    airway_path = airway_path or os.path.join(outdir, "airway.mhd")
    lung_labels = _load_labels(lungs_path, "centerline",
                               "run the lungs stage first")
    airway_labels = _load_labels(airway_path, "centerline",
                                 "run the airway stage first")
    field = load_medialness(outdir, cfg, "centerline")
    lungs = lungs_mod._summarize(lung_labels.data, lung_labels.spacing,
                                 lung_labels.origin)
    try:
        cand = cl.non_max_suppress(field, sample_radius=cfg.nms_radius)
        frags = cl.prune_fragments(cand, airway_labels.data > 0,
                                   cfg.prune_min_voxels, cfg.airway_dilation,
                                   field.response)
        heart_pt = _parse_point(heart) or cl.detect_heart_center(vol, lungs)
        ghat = lungs_mod.normalized_gradient(vol, lungs.both())
        trees = cl.reconnect(frags, field, ghat, lungs, heart_pt,
                             cfg.reconnect_epsilon, cfg.reconnect_lambda)
    except ValueError as exc:
        raise StageError("centerline", str(exc)) from exc
    with open(os.path.join(outdir, "centerline.json"), "w") as fh:
        fh.write(cl.trees_to_json(trees, vol.spacing, vol.origin))
    with open(os.path.join(outdir, "centerline_nodes.csv"), "w") as fh:
        fh.write(cl.trees_to_csv(trees))


def stage_segment(vol_path: str, outdir: str, cfg: PipelineConfig,
                  lungs_path: str | None = None,
                  centerline_path: str | None = None) -> None:
    vol = _load_volume(vol_path, "segment")
    lungs_path = lungs_path or os.path.join(outdir, "lungs.mhd")
    centerline_path = centerline_path or os.path.join(outdir, "centerline.json")
    lung_labels = _load_labels(lungs_path, "segment",
                               "run the lungs stage first")
    _require(centerline_path, "segment", "run the centerline stage first")
    with open(centerline_path) as fh:
        trees = cl.trees_from_json(fh.read())
    lungs = lungs_mod._summarize(lung_labels.data, lung_labels.spacing,
                                 lung_labels.origin)
    air_ref = air_reference_for(cfg, vol, lungs.both())
    try:
        label_by_name = {"left": 2, "right": 3}
        profiles = []
        for tree in trees:
            region = lungs.mask(label_by_name.get(tree.lung, 2))
            profiles.extend(vesselseg.estimate_tree_radii(
                vol, tree, cfg.sphere_radii, cfg.drop_threshold,
                air_reference=air_ref, region_mask=region))
        seg = vesselseg.paint_segmentation(trees, lungs)
    except ValueError as exc:
        raise StageError("segment", str(exc)) from exc
    save_metaimage(seg, os.path.join(outdir, "vessels.mhd"))
    with open(os.path.join(outdir, "radius_profiles.csv"), "w") as fh:
        fh.write(vesselseg.profiles_to_csv(profiles))
    # centerline with radii, for the tortuosity stage and plotting
    with open(os.path.join(outdir, "centerline.json"), "w") as fh:
        fh.write(cl.trees_to_json(trees, vol.spacing, vol.origin))
    with open(os.path.join(outdir, "centerline_nodes.csv"), "w") as fh:
        fh.write(cl.trees_to_csv(trees))


def stage_tortuosity(outdir: str, cfg: PipelineConfig,
                     centerline_path: str | None = None) -> None:
    centerline_path = centerline_path or os.path.join(outdir, "centerline.json")
    _require(centerline_path, "tortuosity", "run the centerline stage first")
    with open(centerline_path) as fh:
        trees = cl.trees_from_json(fh.read())
    try:
        summary = metrics_mod.patient_dm(trees, cfg.dm_min_branch_mm)
    except ValueError as exc:
        raise StageError("tortuosity", str(exc)) from exc
    report = metrics_mod.EvalReport(
        dm_mean=summary["dm_mean"], dm_std=summary["dm_std"],
        dm_range=summary["dm_range"],
        extra={"n_branches": summary["n_branches"],
               "min_branch_mm": cfg.dm_min_branch_mm})
    with open(os.path.join(outdir, "dm_report.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(outdir, "dm_report.txt"), "w") as fh:
        fh.write(report.to_table())


# -- one-shot pipeline -------------------------------------------------------

# Figure-2 style stage naming for the timing table
TIMING_GROUPS = [
    ("lung/airway segmentation", ("airway", "lungs")),
    ("vessel enhancement", ("vesselness",)),
    ("centerline", ("centerline",)),
    ("segmentation", ("segment", "tortuosity")),
]


def run_pipeline(vol_path: str, outdir: str, cfg: PipelineConfig,
                 seed=None, heart=None) -> None:
    os.makedirs(outdir, exist_ok=True)
    if not os.path.exists(vol_path):
        raise StageError("input", f"cannot read input volume {vol_path}")
    try:
        load_metaimage(vol_path)
    except (OSError, ValueError) as exc:
        raise StageError("input", f"cannot read input volume {vol_path}: "
                                  f"{exc}") from exc
    with open(os.path.join(outdir, "run_config.txt"), "w") as fh:
        fh.write(serialize_config(cfg))

    durations = {}

    def timed(name, fn, *args, **kw):
        t0 = time.perf_counter()
        fn(*args, **kw)
        durations[name] = time.perf_counter() - t0

    timed("airway", stage_airway, vol_path, outdir, cfg, seed)
    timed("lungs", stage_lungs, vol_path, outdir, cfg)
    timed("vesselness", stage_vesselness, vol_path, outdir, cfg)
    timed("centerline", stage_centerline, vol_path, outdir, cfg, heart=heart)
    timed("segment", stage_segment, vol_path, outdir, cfg)
    timed("tortuosity", stage_tortuosity, outdir, cfg)

    with open(os.path.join(outdir, "timing.csv"), "w") as fh:
        fh.write("stage,seconds\n")
        for name, parts in TIMING_GROUPS:
            fh.write("%s,%.3f\n" % (name, sum(durations[p] for p in parts)))


# -- phantom-chain evaluation (no torso stages) -------------------------------

def run_vessel_chain(vol: Volume3D, cfg: PipelineConfig, root,
                     truth: LabelVolume | None = None):
    """Vessel chain on a bare phantom: the whole volume acts as one lung and
    the reconnection root is given explicitly (no airway, lungs or heart
    stages). Returns (trees, segmentation, jaccard-or-None)."""
    full = np.full(vol.dims, LEFT_LABEL, np.uint8)
    lungs = lungs_mod._summarize(full, vol.spacing, vol.origin)
    field = run_filter(vol, None, None, cfg.filter_config(), tile_z=cfg.tile_z)
    cand = cl.non_max_suppress(field, sample_radius=cfg.nms_radius)
    frags = cl.prune_fragments(cand, None, cfg.prune_min_voxels,
                               cfg.airway_dilation, field.response)
    ghat = lungs_mod.normalized_gradient(vol, np.ones(vol.dims, bool))
    trees = cl.reconnect(frags, field, ghat, lungs, tuple(root),
                         cfg.reconnect_epsilon, cfg.reconnect_lambda,
                         lung_labels=(LEFT_LABEL,))
    air_ref = air_reference_for(cfg, vol)
    for tree in trees:
        vesselseg.estimate_tree_radii(vol, tree, cfg.sphere_radii,
                                      cfg.drop_threshold,
                                      air_reference=air_ref)
    seg = vesselseg.paint_segmentation(trees, lungs)
    jac = None
    if truth is not None:
        jac = metrics_mod.jaccard(seg.data == vesselseg.VESSEL_LABEL,
                                  truth.data == vesselseg.VESSEL_LABEL)
    return trees, seg, jac


def run_noise_sweep(spec: dict, outdir: str, cfg: PipelineConfig,
                    noise_stds) -> list[tuple[float, float]]:
    """End-to-end vessel-chain run per noise level; writes the phantom,
    ground truth and a jaccard-vs-noise CSV. Returns the (std, jaccard)
    rows."""
    os.makedirs(outdir, exist_ok=True)
    result = phantom_mod.build_phantom(spec)
    save_metaimage(result.volume, os.path.join(outdir, "phantom.mhd"))
    save_metaimage(result.truth, os.path.join(outdir, "truth.mhd"))
    root = spec.get("root_ijk")
    if root is None:
        root = [int(round(v)) for v in spec["tubes"][0]["points"][0]]
    rows = []
    for i, std in enumerate(noise_stds):
        noisy = phantom_mod.add_gaussian_noise(
            result.volume, phantom_mod.NoiseSpec(float(std),
                                                 cfg.noise_seed + i))
        _, _, jac = run_vessel_chain(noisy, cfg, root, result.truth)
        rows.append((float(std), float(jac)))
    with open(os.path.join(outdir, "jaccard_vs_noise.csv"), "w") as fh:
        fh.write("noise_std_hu,jaccard\n")
        for std, jac in rows:
            fh.write("%.6g,%.6g\n" % (std, jac))
    return rows
