"""Synthetic ground-truth volumes: tube trees, torso-style bodies, noise.

Tubes are polylines with per-point radii; a voxel is foreground when its
distance to the polyline is at most the locally interpolated radius. The
intensity image gets a one-voxel linear partial-volume ramp at tube borders;
the label image stays crisp.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .volume import DEFAULT_LEGEND, LabelVolume, Volume3D


@dataclass(frozen=True)
class TubeSpec:
    points: np.ndarray        # (n, 3) control points, mm
    radii: np.ndarray         # (n,) radius per point, mm
    hu: float                 # tube intensity
    ramp_voxels: float = 1.0  # partial-volume ramp width (0 = crisp)
    label: int = 4            # ground-truth label (4 = vessel, 1 = airway)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, np.float64))
        rad = np.atleast_1d(np.asarray(self.radii, np.float64))
        if len(pts) < 2:
            raise ValueError("a tube needs at least 2 control points")
        if len(rad) == 1:
            rad = np.full(len(pts), rad[0])
        if len(rad) != len(pts):
            raise ValueError("radii must match control points")
        if np.any(rad <= 0):
            raise ValueError("radii must be positive")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "radii", rad)


@dataclass(frozen=True)
class EllipsoidSpec:
    center: tuple[float, float, float]  # mm
    axes: tuple[float, float, float]    # semi-axes, mm
    hu: float


@dataclass(frozen=True)
class NoiseSpec:
    std: float
    seed: int = 0

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("noise std must be >= 0")


@dataclass
class PhantomResult:
    volume: Volume3D
    truth: LabelVolume
    centerlines: list[np.ndarray] = field(default_factory=list)  # (m,3) mm per tube


def _segment_distances(grid_pts, p0, p1, r0, r1):
    """Distance from (m,3) points to segment p0-p1 and the radius
    interpolated at the closest parameter."""
    d = p1 - p0
    seg_len2 = float(d @ d)
    if seg_len2 == 0:
        t = np.zeros(len(grid_pts))
    else:
        t = np.clip((grid_pts - p0) @ d / seg_len2, 0.0, 1.0)
    closest = p0 + t[:, None] * d
    dist = np.linalg.norm(grid_pts - closest, axis=1)
    return dist, r0 + t * (r1 - r0)


def rasterize_tubes(tubes, dims, spacing=(1.0, 1.0, 1.0),
                    background_hu: float = -1000.0,
                    base_volume: Volume3D | None = None) -> PhantomResult:
    """Render tube specs into an intensity volume plus a crisp vessel-label
    ground truth and per-tube centerline samples (one sample per voxel pitch).

    When base_volume is given, tubes are painted over it (the partial-volume
    ramp blends against the local base value).
    """
    nx, ny, nz = dims
    sp = np.asarray(spacing, np.float64)
    if base_volume is not None:
        intensity = base_volume.data.astype(np.float32).copy()
    else:
        intensity = np.full(dims, background_hu, np.float32)
    label = np.zeros(dims, np.uint8)
    pitch = float(sp.min())
    centerlines = []

    for tube in tubes:
        pts = tube.points
        rad = tube.radii
        if np.any(pts < -0.5 * sp) or np.any(pts > (np.array(dims) - 0.5) * sp):
            raise ValueError("tube exits the volume bounds")
        lo_mm = (pts - rad[:, None]).min(axis=0)
        hi_mm = (pts + rad[:, None]).max(axis=0)
        ramp_mm = tube.ramp_voxels * float(sp.mean())
        margin = ramp_mm + pitch
        lo = np.maximum(np.floor((lo_mm - margin) / sp).astype(int), 0)
        hi = np.minimum(np.ceil((hi_mm + margin) / sp).astype(int) + 1, dims)
        ii, jj, kk = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)],
                                 indexing="ij")
        box_idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        box_mm = box_idx * sp

        min_excess = np.full(len(box_mm), np.inf)
        for a in range(len(pts) - 1):
            dist, local_r = _segment_distances(box_mm, pts[a], pts[a + 1],
                                               rad[a], rad[a + 1])
            np.minimum(min_excess, dist - local_r, out=min_excess)

        sub = tuple(slice(a, b) for a, b in zip(lo, hi))
        shape = tuple(b - a for a, b in zip(lo, hi))
        excess = min_excess.reshape(shape)
        inside = excess <= 0.0
        if tube.label:
            label[sub][inside] = tube.label
        if ramp_mm > 0:
            frac = np.clip(0.5 - excess / ramp_mm, 0.0, 1.0)
        else:
            frac = inside.astype(np.float32)
        view = intensity[sub]
        intensity[sub] = view + (np.float32(tube.hu) - view) * frac.astype(np.float32)

        # centerline resampled at one sample per voxel pitch
        seg_vecs = np.diff(pts, axis=0)
        seg_lens = np.linalg.norm(seg_vecs, axis=1)
        total = seg_lens.sum()
        n_samples = max(int(np.ceil(total / pitch)) + 1, 2)
        s = np.linspace(0.0, total, n_samples)
        cum = np.concatenate([[0.0], np.cumsum(seg_lens)])
        samples = np.empty((n_samples, 3))
        for c in range(3):
            samples[:, c] = np.interp(s, cum, pts[:, c])
        centerlines.append(samples)

    vol = Volume3D(intensity, tuple(spacing))
    truth = LabelVolume(label, tuple(spacing), legend=dict(DEFAULT_LEGEND))
    return PhantomResult(vol, truth, centerlines)


def rasterize_ellipsoids(ellipsoids, dims, spacing=(1.0, 1.0, 1.0),
                         background_hu: float = -1000.0) -> Volume3D:
    """Paint ellipsoids (in listed order) over a uniform background."""
    sp = np.asarray(spacing, np.float64)
    grids = np.meshgrid(*[np.arange(n) * s for n, s in zip(dims, sp)],
                        indexing="ij")
    data = np.full(dims, background_hu, np.float32)
    for e in ellipsoids:
        c = np.asarray(e.center, np.float64)
        a = np.asarray(e.axes, np.float64)
        q = sum(((g - ci) / ai) ** 2 for g, ci, ai in zip(grids, c, a))
        data[q <= 1.0] = e.hu
    return Volume3D(data, tuple(spacing))


def add_gaussian_noise(vol: Volume3D, spec: NoiseSpec) -> Volume3D:
    """Add i.i.d. Gaussian noise, reproducible from the seed (counter-based
    generator, so the result does not depend on any slab partitioning)."""
    if spec.std == 0:
        return vol
    rng = np.random.Generator(np.random.Philox(spec.seed))
    noise = rng.normal(0.0, spec.std, size=vol.dims).astype(np.float32)
    return vol.with_data(vol.data.astype(np.float32) + noise)


# -- JSON phantom specs ------------------------------------------------------

def spec_from_json(obj: dict):
    """Parse {dims, spacing, background_hu, tubes:[{points, radii, hu}],
    ellipsoids:[{center, axes, hu}]} into constructor arguments."""
    try:
        dims = tuple(int(v) for v in obj["dims"])
        spacing = tuple(float(v) for v in obj.get("spacing", (1.0, 1.0, 1.0)))
        background = float(obj.get("background_hu", -1000.0))
        tubes = [TubeSpec(np.asarray(t["points"], float),
                          np.asarray(t["radii"], float),
                          float(t["hu"]),
                          float(t.get("ramp_voxels", 1.0)),
                          int(t.get("label", 4)))
                 for t in obj.get("tubes", [])]
        ellipsoids = [EllipsoidSpec(tuple(e["center"]), tuple(e["axes"]),
                                    float(e["hu"]))
                      for e in obj.get("ellipsoids", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed phantom spec: {exc}") from exc
    return dims, spacing, background, ellipsoids, tubes


def build_phantom(obj: dict) -> PhantomResult:
    dims, spacing, background, ellipsoids, tubes = spec_from_json(obj)
    base = rasterize_ellipsoids(ellipsoids, dims, spacing, background)
    return rasterize_tubes(tubes, dims, spacing, background, base_volume=base)


def load_phantom_spec(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# -- bundled phantoms --------------------------------------------------------

def branching_tree_spec(dims=(128, 128, 128), background_hu: float = -850.0,
                        vessel_hu: float = -50.0) -> dict:
    """Three-generation branching tube tree (radii 4/3/2 voxels) used by the
    noise-robustness experiment.

    Branch runs are axis-aligned with elbows, so the discrete centerline can
    represent every branch exactly and the measured Jaccard reflects noise
    behavior rather than lattice-representation error (oblique orientations
    are exercised separately by the rotated-cylinder checks)."""
    cx = dims[0] / 2.0
    cy = dims[1] / 2.0
    tubes = [
        {"points": [[cx, cy, 12.0], [cx, cy, 40.0]], "radii": [4.0, 4.0],
         "hu": vessel_hu},
    ]
    for sx in (-1.0, 1.0):
        x2 = cx + sx * 30.0
        tubes.append({
            "points": [[cx, cy, 40.0], [x2, cy, 40.0], [x2, cy, 72.0]],
            "radii": [3.0, 3.0, 3.0], "hu": vessel_hu})
        for sy in (-1.0, 1.0):
            y3 = cy + sy * 26.0
            tubes.append({
                "points": [[x2, cy, 72.0], [x2, y3, 72.0], [x2, y3, 100.0]],
                "radii": [2.0, 2.0, 2.0], "hu": vessel_hu})
    return {
        "dims": list(dims),
        "spacing": [1.0, 1.0, 1.0],
        "background_hu": background_hu,
        "tubes": tubes,
        "root_ijk": [int(round(cx)), int(round(cy)), 12],
    }


def torso_spec(dims=(96, 96, 112)) -> dict:
    """Torso-style phantom: body cylinder, two lungs, heart, trachea with
    main bronchi reaching into the lungs, and a small vessel tree per lung."""
    nx, ny, nz = dims
    cx, cy = nx / 2.0, ny / 2.0
    lung_dx = 21.0
    lung_cz = 52.0
    carina_z = 78.0
    top = nz - 1.0
    ell = [
        # body: elliptical cylinder approximated by a very long ellipsoid
        {"center": [cx, cy, nz / 2.0], "axes": [0.46 * nx, 0.42 * ny, 4.0 * nz],
         "hu": 40.0},
        {"center": [cx - lung_dx, cy, lung_cz], "axes": [15.0, 26.0, 34.0],
         "hu": -850.0},
        {"center": [cx + lung_dx, cy, lung_cz], "axes": [15.0, 26.0, 34.0],
         "hu": -850.0},
        # heart between the lungs, below the carina
        {"center": [cx, cy + 6.0, 40.0], "axes": [5.0, 9.0, 12.0], "hu": 300.0},
    ]
    tubes = [
        # trachea from the top slice down to the carina (crisp: no ramp)
        {"points": [[cx, cy - 12.0, top], [cx, cy - 12.0, carina_z]],
         "radii": [3.5, 3.5], "hu": -1000.0, "ramp_voxels": 0.0, "label": 1},
    ]
    for sx in (-1.0, 1.0):
        # main bronchus slanting into the lung; endpoint well inside
        tubes.append({
            "points": [[cx, cy - 12.0, carina_z],
                       [cx + sx * lung_dx, cy - 4.0, 64.0]],
            "radii": [2.6, 2.6], "hu": -1000.0, "ramp_voxels": 0.0,
            "label": 1})
        # vessels: a rectilinear tree entering at the hilum (medial surface,
        # facing the heart) and staying clear of the bronchus tunnel, which
        # is open to outside air
        lx = cx + sx * lung_dx
        vy = cy + 6.0
        tubes.append({
            "points": [[lx - sx * 8.0, vy, 38.0], [lx, vy, 38.0],
                       [lx, vy, 58.0]],
            "radii": [3.0, 3.0, 3.0], "hu": 100.0})
        tubes.append({
            "points": [[lx, vy, 58.0], [lx, vy + 8.0, 58.0],
                       [lx, vy + 8.0, 70.0]],
            "radii": [2.0, 2.0, 2.0], "hu": 100.0})
        tubes.append({
            "points": [[lx, vy, 58.0], [lx + sx * 6.0, vy, 58.0],
                       [lx + sx * 6.0, vy, 70.0]],
            "radii": [2.0, 2.0, 2.0], "hu": 100.0})
    return {
        "dims": list(dims),
        "spacing": [1.0, 1.0, 1.0],
        "background_hu": -1000.0,
        "ellipsoids": ell,
        "tubes": tubes,
    }


BUNDLED_SPECS = {
    "tree128": branching_tree_spec,
    "torso": torso_spec,
}
