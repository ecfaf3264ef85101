"""Trachea seed detection, iterative adaptive region growing with leakage
detection, and skeleton-based labeling of the trachea and main bronchi.

Region growing starts from a 1 HU window around the seed intensity and widens
it by 1 HU per iteration, re-flooding from the previous segmentation. Growth
stops when the total or edge voxel count jumps past leak_factor times the
mean of all previous counts (a leak into the parenchyma); the mask from the
previous iteration is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .imageops import edge_voxels
from .volume import (
    Connectivity,
    LabelVolume,
    Volume3D,
    VoxelIndex,
    connectivity_structure,
)

TRACHEA_LABEL = 1
LEFT_LABEL = 2
RIGHT_LABEL = 3


@dataclass(frozen=True)
class GrowParams:
    seed: VoxelIndex
    th_min: float
    th_max: float
    step: float = 1.0
    leak_factor: float = 3.0
    max_iterations: int = 400

    def __post_init__(self):
        if self.th_min > self.th_max:
            raise ValueError("th_min must be <= th_max")
        if self.leak_factor <= 1:
            raise ValueError("leak_factor must be > 1")

    @classmethod
    def from_seed(cls, vol: Volume3D, seed: VoxelIndex, **kw) -> "GrowParams":
        value = float(vol.data[tuple(seed)])
        return cls(seed=tuple(int(v) for v in seed),
                   th_min=value - 1.0, th_max=value + 1.0, **kw)


@dataclass
class GrowResult:
    mask: np.ndarray                  # bool
    trace: list[tuple]                # (t, th_min, th_max, total, edge)
    leaked: bool
    leak_iteration: int | None


@dataclass
class AirwayTree:
    """Labeled airway segmentation: mask voxels carry 1 (trachea), 2 (left
    main bronchus subtree) or 3 (right)."""

    mask: LabelVolume
    skeleton: np.ndarray              # (m, 3) skeleton voxels
    adjacency: dict                   # voxel tuple -> list of voxel tuples
    carina: VoxelIndex
    branches: dict[str, np.ndarray] = field(default_factory=dict)

    def binary_mask(self) -> np.ndarray:
        return self.mask.data > 0


def detect_trachea_seed(vol: Volume3D, dark_hu: float = -900.0,
                        min_area: int = 20, max_area: int = 1500,
                        min_circularity: float = 0.5) -> VoxelIndex:
    """Find the trachea on the top-most axial slice: the most circular dark
    component of plausible area. Returns its centroid snapped to the nearest
    dark voxel of the component."""
    k = vol.dims[2] - 1
    sl = vol.data[:, :, k]
    dark = sl < dark_hu
    labels, n = ndimage.label(dark)  # 4-connected in-plane
    best = None
    for c in range(1, n + 1):
        comp = labels == c
        area = int(comp.sum())
        if not (min_area <= area <= max_area):
            continue
        interior = ndimage.binary_erosion(comp, border_value=0)
        perimeter = area - int(interior.sum())
        if perimeter == 0:
            continue
        circ = 4.0 * np.pi * area / perimeter ** 2
        if circ < min_circularity:
            continue
        if best is None or circ > best[0]:
            best = (circ, comp)
    if best is None:
        raise ValueError(
            "no circular dark component on the top slice; supply a seed")
    comp = best[1]
    pts = np.argwhere(comp)
    centroid = pts.mean(axis=0)
    nearest = pts[np.argmin(((pts - centroid) ** 2).sum(axis=1))]
    return (int(nearest[0]), int(nearest[1]), int(k))


def _flood(threshold_mask: np.ndarray, seed_mask: np.ndarray) -> np.ndarray:
    """N6 flood fill of threshold_mask from every voxel of seed_mask."""
    labels, n = ndimage.label(threshold_mask,
                              structure=connectivity_structure(Connectivity.N6))
    if n == 0:
        return np.zeros(threshold_mask.shape, bool)
    hit = np.unique(labels[seed_mask & threshold_mask])
    hit = hit[hit > 0]
    if len(hit) == 0:
        return np.zeros(threshold_mask.shape, bool)
    keep = np.zeros(n + 1, bool)
    keep[hit] = True
    return keep[labels]


def grow_airway(vol: Volume3D, params: GrowParams,
                stall_iterations: int = 5) -> GrowResult:
    """Iterative region growing with the dual leakage criterion.

    Besides the leak stop, growth also stops after max_iterations or when the
    voxel count has been unchanged for stall_iterations in a row.
    """
    data = vol.data
    seed = tuple(params.seed)
    seed_mask = np.zeros(vol.dims, bool)
    seed_mask[seed] = True

    prev = None
    trace = []
    totals: list[int] = []
    edges: list[int] = []
    stall = 0
    for t in range(1, params.max_iterations + 1):
        widen = params.step * (t - 1)
        lo = params.th_min - widen
        hi = params.th_max + widen
        window = (data > lo) & (data < hi)
        mask = _flood(window, seed_mask if prev is None else prev)
        total = int(mask.sum())
        edge = int(edge_voxels(mask).sum())
        trace.append((t, lo, hi, total, edge))
        if t == 1 and total == 0:
            raise ValueError(
                f"seed {seed} does not satisfy the initial threshold window")
        if totals:
            mean_total = float(np.mean(totals))
            mean_edge = float(np.mean(edges))
            if (total > params.leak_factor * mean_total
                    or edge > params.leak_factor * mean_edge):
                return GrowResult(prev, trace, True, t)
        if prev is not None and total == totals[-1]:
            stall += 1
        else:
            stall = 0
        totals.append(total)
        edges.append(edge)
        prev = mask
        if stall >= stall_iterations:
            break
    return GrowResult(prev, trace, False, None)


def _skeleton_adjacency(skel: np.ndarray) -> dict:
    voxels = set(map(tuple, np.argwhere(skel)))
    adj = {}
    for v in voxels:
        nbs = []
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for dk in (-1, 0, 1):
                    if di == dj == dk == 0:
                        continue
                    w = (v[0] + di, v[1] + dj, v[2] + dk)
                    if w in voxels:
                        nbs.append(w)
        adj[v] = sorted(nbs, key=lambda p: (p[2], p[1], p[0]))
    return adj


def skeletonize_and_label(mask, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                          flip_lr: bool = False) -> AirwayTree:
    """Thin the airway mask to a skeleton, find the carina (first junction
    below the topmost endpoint) and label trachea / left / right subtrees.

    Patient-left is the larger x coordinate under standard orientation;
    flip_lr swaps the two labels.
    """
    fg = mask.data > 0 if isinstance(mask, LabelVolume) else np.asarray(mask, bool)
    skel = skeletonize(fg).astype(bool)
    if not skel.any():
        raise ValueError("airway mask produced an empty skeleton")
    adj = _skeleton_adjacency(skel)

    endpoints = [v for v, nbs in adj.items() if len(nbs) == 1]
    if not endpoints:
        raise ValueError("skeleton has no endpoints; carina undetectable")
    start = max(endpoints, key=lambda v: (v[2], -v[0], -v[1]))

    # walk down the chain until the first junction
    path = [start]
    seen = {start}
    cur = start
    carina = None
    while True:
        if len(adj[cur]) >= 3:
            carina = cur
            break
        nxt = [w for w in adj[cur] if w not in seen]
        if not nxt:
            break
        cur = nxt[0]
        seen.add(cur)
        path.append(cur)
    if carina is None:
        raise ValueError("no junction found walking from the topmost endpoint; "
                         "carina undetectable")

    # split the remaining skeleton at the carina
    rest = {v for v in adj if v != carina}
    comps = []
    unvisited = set(rest)
    while unvisited:
        root = unvisited.pop()
        comp = {root}
        stack = [root]
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if w in unvisited:
                    unvisited.discard(w)
                    comp.add(w)
                    stack.append(w)
        comps.append(comp)

    trachea_comp = next((c for c in comps if start in c), set())
    sub_comps = sorted((c for c in comps if c is not trachea_comp),
                       key=len, reverse=True)
    if len(sub_comps) < 2:
        raise ValueError("carina does not split into two subtrees")

    label_of = {}
    for v in trachea_comp:
        label_of[v] = TRACHEA_LABEL
    label_of[carina] = TRACHEA_LABEL
    left_label, right_label = (RIGHT_LABEL, LEFT_LABEL) if flip_lr else (
        LEFT_LABEL, RIGHT_LABEL)
    for comp in sub_comps:
        centroid_x = np.mean([v[0] for v in comp])
        lab = left_label if centroid_x > carina[0] else right_label
        for v in comp:
            label_of[v] = lab

    # propagate skeleton labels to all mask voxels (N6 within the mask)
    labels = np.zeros(fg.shape, np.uint8)
    for v, lab in label_of.items():
        labels[v] = lab
    structure = connectivity_structure(Connectivity.N6)
    while True:
        unl = fg & (labels == 0)
        if not unl.any():
            break
        changed = False
        for lab in (TRACHEA_LABEL, LEFT_LABEL, RIGHT_LABEL):
            grown = ndimage.binary_dilation(labels == lab, structure=structure)
            take = grown & unl
            if take.any():
                labels[take] = lab
                unl &= ~take
                changed = True
        if not changed:
            # mask voxels disconnected from the skeleton: give them trachea
            labels[unl] = TRACHEA_LABEL
            break

    branches = {
        "trachea": np.array(sorted(trachea_comp | {carina})),
        "left_main": np.array(sorted(next(
            c for c in sub_comps if label_of[next(iter(c))] == LEFT_LABEL))),
        "right_main": np.array(sorted(next(
            c for c in sub_comps if label_of[next(iter(c))] == RIGHT_LABEL))),
    }
    lab_vol = LabelVolume(labels, spacing, origin)
    return AirwayTree(lab_vol, np.argwhere(skel), adj, carina, branches)
