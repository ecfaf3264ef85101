"""Coarse lung extraction and left/right separation.

The coarse mask is everything darker than the Otsu threshold once the
boundary-connected exterior air is removed. Separation labels every coarse
voxel by the cheaper multi-source shortest path to the left vs right main
bronchus, with a cost field that weights image gradients 4:1 over plain
region traversal so the split cannot shortcut across the fissure.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .airway import LEFT_LABEL, RIGHT_LABEL, AirwayTree
from .graph import GridGraph
from .imageops import (
    StructuringElement,
    farid_gradient,
    fill_holes_3d,
    morphological_close,
    otsu_threshold,
)
from .volume import Connectivity, LabelVolume, Volume3D, connectivity_structure

GRADIENT_WEIGHT = 0.8
REGION_WEIGHT = 0.2


@dataclass
class PathCostField:
    cost: np.ndarray       # float32, +inf outside the region
    region: np.ndarray     # bool: coarse lung minus airway
    norm_gradient: np.ndarray  # the [0,1] gradient term, reused by reconnection


@dataclass
class LungLabels:
    labels: LabelVolume    # {0, 2, 3}
    counts: dict[int, int]
    bboxes: dict[int, tuple]   # label -> ((imin,jmin,kmin), (imax,jmax,kmax))
    unreachable: int = 0

    def mask(self, label: int) -> np.ndarray:
        return self.labels.data == label

    def both(self) -> np.ndarray:
        return (self.labels.data == LEFT_LABEL) | (self.labels.data == RIGHT_LABEL)


def _bbox(mask: np.ndarray):
    pts = np.argwhere(mask)
    if len(pts) == 0:
        return None
    return (tuple(int(v) for v in pts.min(axis=0)),
            tuple(int(v) for v in pts.max(axis=0)))


def _summarize(labels: np.ndarray, spacing, origin, unreachable=0) -> LungLabels:
    lv = LabelVolume(labels.astype(np.uint8), spacing, origin)
    counts = {lab: int((labels == lab).sum()) for lab in (LEFT_LABEL, RIGHT_LABEL)}
    bboxes = {lab: _bbox(labels == lab) for lab in (LEFT_LABEL, RIGHT_LABEL)}
    return LungLabels(lv, counts, bboxes, unreachable)


def coarse_lung_mask(vol: Volume3D, histogram_bins: int = 256,
                     keep_fraction: float = 0.10,
                     min_volume_fraction: float = 0.01,
                     exclude=None) -> np.ndarray:
    """Otsu-dark voxels with exterior air removed; keeps every component at
    least keep_fraction of the largest (both lungs may be disconnected), then
    fills interior holes (vessels).

    exclude (typically the airway mask) is carved out of the air mask first;
    without it, lungs that reach outside air through the trachea lumen would
    be dropped along with the exterior."""
    threshold = otsu_threshold(vol, histogram_bins)
    air = vol.data < threshold
    if exclude is not None:
        air &= ~np.asarray(exclude, bool)
    labels, n = ndimage.label(air, structure=connectivity_structure(Connectivity.N6))
    if n == 0:
        raise ValueError("no candidate lung component of plausible size")
    boundary = np.zeros(vol.dims, bool)
    boundary[0, :, :] = boundary[-1, :, :] = True
    boundary[:, 0, :] = boundary[:, -1, :] = True
    boundary[:, :, 0] = boundary[:, :, -1] = True
    touching = set(np.unique(labels[boundary & air]))
    sizes = np.bincount(labels.reshape(-1))
    candidates = [(c, int(sizes[c])) for c in range(1, n + 1) if c not in touching]
    if not candidates:
        raise ValueError("no candidate lung component of plausible size")
    largest = max(s for _, s in candidates)
    if largest < min_volume_fraction * vol.data.size:
        raise ValueError("no candidate lung component of plausible size")
    keep = {c for c, s in candidates if s >= keep_fraction * largest}
    mask = np.isin(labels, list(keep))
    return fill_holes_3d(mask)


def normalized_gradient(vol: Volume3D, region: np.ndarray,
                        percentile: float = 99.0) -> np.ndarray:
    """|grad I| scaled into [0,1] by its percentile inside the region."""
    gmag = farid_gradient(vol).magnitude()
    vals = gmag[region]
    scale = float(np.percentile(vals, percentile)) if vals.size else 0.0
    if scale <= 0:
        return np.zeros(vol.dims, np.float32)
    return np.clip(gmag / scale, 0.0, 1.0).astype(np.float32)


def build_cost_field(vol: Volume3D, coarse_mask: np.ndarray,
                     airway_mask: np.ndarray) -> PathCostField:
    """Traversal cost on coarse-lung-minus-airway voxels:
    0.8 * normalized gradient + 0.2 constant region term; +inf outside."""
    region = np.asarray(coarse_mask, bool) & ~np.asarray(airway_mask, bool)
    if not region.any():
        raise ValueError("empty region: coarse mask minus airway has no voxels")
    ghat = normalized_gradient(vol, region)
    cost = np.full(vol.dims, np.inf, np.float32)
    cost[region] = GRADIENT_WEIGHT * ghat[region] + REGION_WEIGHT
    return PathCostField(cost, region, ghat)


def split_lungs(cost: PathCostField, airway) -> LungLabels:
    """Label each region voxel by the cheaper source set: voxels adjacent to
    the left vs right labeled bronchi. Ties go to the left lung.

    airway may be an AirwayTree or the labeled LabelVolume itself."""
    airway_labels = airway.mask if isinstance(airway, AirwayTree) else airway
    structure = connectivity_structure(Connectivity.N6)
    region = cost.region
    graph = GridGraph(region, cost.cost)

    dists = {}
    for lab in (LEFT_LABEL, RIGHT_LABEL):
        bronchus = airway_labels.data == lab
        touch = ndimage.binary_dilation(bronchus, structure=structure) & region
        if not touch.any():
            warnings.warn(f"no region voxel touches bronchus label {lab}")
            dists[lab] = np.full(graph.n, np.inf)
            continue
        sources = graph.ids_of(np.argwhere(touch))
        dists[lab], _ = graph.dijkstra(sources)

    dl, dr = dists[LEFT_LABEL], dists[RIGHT_LABEL]
    node_lab = np.zeros(graph.n, np.uint8)
    reach_l = np.isfinite(dl)
    reach_r = np.isfinite(dr)
    node_lab[reach_l & (dl <= dr)] = LEFT_LABEL
    node_lab[reach_r & (dr < dl)] = RIGHT_LABEL
    unreachable = int((~reach_l & ~reach_r).sum())
    if unreachable:
        warnings.warn(f"{unreachable} lung voxels unreachable from both bronchi")

    labels = np.zeros(region.shape, np.uint8)
    labels[region] = node_lab
    return _summarize(labels, airway_labels.spacing, airway_labels.origin,
                      unreachable)


def refine_lungs(lung_labels: LungLabels, airway_mask: np.ndarray,
                 closing_iterations: int = 10) -> LungLabels:
    """Remove airway voxels and close each lung independently; voxels claimed
    by both closings go to the nearer pre-closing lung (N6 distance, ties to
    the left)."""
    airway = np.asarray(airway_mask, bool)
    pre = {lab: lung_labels.mask(lab) & ~airway for lab in (LEFT_LABEL, RIGHT_LABEL)}
    closed = {lab: morphological_close(m, StructuringElement.STAR6,
                                       closing_iterations) & ~airway
              for lab, m in pre.items()}
    overlap = closed[LEFT_LABEL] & closed[RIGHT_LABEL]
    labels = np.zeros(airway.shape, np.uint8)
    labels[closed[LEFT_LABEL]] = LEFT_LABEL
    labels[closed[RIGHT_LABEL]] = RIGHT_LABEL
    if overlap.any():
        dist = {}
        for lab in (LEFT_LABEL, RIGHT_LABEL):
            if pre[lab].any():
                dist[lab] = ndimage.distance_transform_cdt(
                    ~pre[lab], metric="taxicab")
            else:
                dist[lab] = np.full(airway.shape, np.iinfo(np.int32).max)
        to_left = dist[LEFT_LABEL] <= dist[RIGHT_LABEL]
        labels[overlap] = np.where(to_left[overlap], LEFT_LABEL, RIGHT_LABEL)
    lv = lung_labels.labels
    return _summarize(labels, lv.spacing, lv.origin, lung_labels.unreachable)
