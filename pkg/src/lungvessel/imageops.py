"""Reusable scalar-field operators on 3D volumes.

Separable Gaussian smoothing, 5-tap rotation-invariant derivative filters,
a 1.7x resolution pyramid step, Otsu thresholding, connected components,
star-element morphology and 3D hole filling. Boundary policy everywhere is
edge replication.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .volume import Connectivity, LabelVolume, Volume3D, connectivity_structure

PYRAMID_FACTOR = 1.7


class StructuringElement(Enum):
    STAR6 = "star6"  # six axis unit steps plus center


def _element_structure(element: StructuringElement) -> np.ndarray:
    if element is not StructuringElement.STAR6:
        raise ValueError(f"unsupported structuring element {element}")
    return connectivity_structure(Connectivity.N6)


# -- derivative kernels ------------------------------------------------------
#
# 5-tap smoothing/derivative pairs (Farid-Simoncelli style), rescaled so that
# polynomial responses are exact: the prefilter sums to 1, the first
# derivative has unit first moment, and the second derivative has zero sum
# and second moment 2. Taps are listed for k = -2..2 in correlation order.

def _normalized_taps():
    p1 = np.array([0.037659, 0.249153, 0.426375, 0.249153, 0.037659])
    d1 = np.array([-0.109604, -0.276691, 0.0, 0.276691, 0.109604])
    p2 = np.array([0.030320, 0.249724, 0.439911, 0.249724, 0.030320])
    d1b = np.array([-0.104550, -0.292315, 0.0, 0.292315, 0.104550])
    a, b = 0.232905, 0.002668
    d2 = np.array([a, b, -2.0 * (a + b), b, a])  # forced zero sum

    k = np.arange(-2, 3)
    p1 /= p1.sum()
    d1 /= (k * d1).sum()
    p2 /= p2.sum()
    d1b /= (k * d1b).sum()
    d2 /= (k * k * d2).sum() / 2.0
    return p1, d1, p2, d1b, d2


FARID_P1, FARID_D1, FARID_P2, FARID_D1B, FARID_D2 = _normalized_taps()


@dataclass(frozen=True)
class GradientField:
    """Per-voxel 3-vector field, components along (x, y, z) in the last axis."""

    data: np.ndarray  # (nx, ny, nz, 3) float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def dims(self):
        return self.data.shape[:3]

    def magnitude(self) -> np.ndarray:
        return np.sqrt((self.data.astype(np.float32) ** 2).sum(axis=-1))


@dataclass(frozen=True)
class PyramidLevel:
    level: int
    scale_factor: float
    volume: Volume3D


def _sep3(data: np.ndarray, tx, ty, tz, out_dtype=np.float32) -> np.ndarray:
    """Separable correlation with one 1D tap vector per axis, edge replicated."""
    out = ndimage.correlate1d(data.astype(out_dtype, copy=False),
                              np.asarray(tx, out_dtype), axis=0, mode="nearest")
    out = ndimage.correlate1d(out, np.asarray(ty, out_dtype), axis=1, mode="nearest")
    out = ndimage.correlate1d(out, np.asarray(tz, out_dtype), axis=2, mode="nearest")
    return out


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized Gaussian taps truncated at +-ceil(3*sigma)."""
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def gaussian_smooth(vol: Volume3D, sigma: float) -> Volume3D:
    """Separable Gaussian convolution; sigma is in voxel units, sigma=0 is
    the identity."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return vol
    k = gaussian_kernel1d(sigma)
    return vol.with_data(_sep3(vol.data, k, k, k))


def farid_gradient(vol: Volume3D) -> GradientField:
    """Rotation-invariant gradient: 5-tap derivative along each axis with the
    matched prefilter along the other two. Units are HU per voxel step."""
    if min(vol.dims) < 5:
        raise ValueError(f"volume dims {vol.dims} smaller than the 5-tap support")
    p, d = FARID_P1, FARID_D1
    gx = _sep3(vol.data, d, p, p)
    gy = _sep3(vol.data, p, d, p)
    gz = _sep3(vol.data, p, p, d)
    return GradientField(np.stack([gx, gy, gz], axis=-1), vol.spacing)


_HESSIAN_TAPS = {
    # (row, col) -> taps along (x, y, z)
    (0, 0): (FARID_D2, FARID_P2, FARID_P2),
    (1, 1): (FARID_P2, FARID_D2, FARID_P2),
    (2, 2): (FARID_P2, FARID_P2, FARID_D2),
    (0, 1): (FARID_D1B, FARID_D1B, FARID_P2),
    (0, 2): (FARID_D1B, FARID_P2, FARID_D1B),
    (1, 2): (FARID_P2, FARID_D1B, FARID_D1B),
}


def hessian_field(vol: Volume3D) -> np.ndarray:
    """All six distinct Hessian entries, shape (nx, ny, nz, 6) ordered
    (xx, xy, xz, yy, yz, zz)."""
    if min(vol.dims) < 5:
        raise ValueError(f"volume dims {vol.dims} smaller than the 5-tap support")
    comps = []
    for key in [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]:
        tx, ty, tz = _HESSIAN_TAPS[key]
        comps.append(_sep3(vol.data, tx, ty, tz))
    return np.stack(comps, axis=-1)


def hessian_at(vol: Volume3D, idx) -> np.ndarray:
    """Symmetric 3x3 Hessian at one voxel via the separable 5-tap filters.

    The index must be at least 4 voxels from every face so the filter support
    stays inside the volume.
    """
    i, j, k = idx
    nx, ny, nz = vol.dims
    if not (4 <= i < nx - 4 and 4 <= j < ny - 4 and 4 <= k < nz - 4):
        raise ValueError(f"index {idx} too close to the volume faces")
    win = vol.data[i - 2:i + 3, j - 2:j + 3, k - 2:k + 3].astype(np.float64)
    H = np.empty((3, 3))
    for (r, c), (tx, ty, tz) in _HESSIAN_TAPS.items():
        v = np.einsum("abc,a,b,c->", win, tx, ty, tz)
        H[r, c] = v
        H[c, r] = v
    return H


def pyramid_dims(dims, factor: float = PYRAMID_FACTOR):
    """ceil(dims / factor) per axis, in exact integer arithmetic for the
    default 1.7 step."""
    if factor == PYRAMID_FACTOR:
        return tuple(-(-(d * 10) // 17) for d in dims)
    return tuple(int(np.ceil(d / factor)) for d in dims)


def downsample_17(vol: Volume3D) -> Volume3D:
    """One pyramid step: presmooth with sigma=0.85 voxels, then trilinearly
    sample the input at output_index * 1.7. Spacing is multiplied by 1.7."""
    if min(vol.dims) < 2:
        raise ValueError(f"cannot downsample degenerate dims {vol.dims}")
    smoothed = gaussian_smooth(vol.astype(np.float32), 0.85)
    out_dims = pyramid_dims(vol.dims)
    coords = np.meshgrid(*[np.arange(n, dtype=np.float64) * PYRAMID_FACTOR
                           for n in out_dims], indexing="ij")
    data = ndimage.map_coordinates(smoothed.data, coords, order=1, mode="nearest")
    spacing = tuple(s * PYRAMID_FACTOR for s in vol.spacing)
    return Volume3D(data.astype(np.float32), spacing, vol.origin)


def build_pyramid(vol: Volume3D, n_levels: int) -> list[PyramidLevel]:
    levels = [PyramidLevel(0, 1.0, vol.astype(np.float32))]
    for lev in range(1, n_levels):
        prev = levels[-1].volume
        levels.append(PyramidLevel(lev, PYRAMID_FACTOR ** lev, downsample_17(prev)))
    return levels


def otsu_threshold(vol, histogram_bins: int = 256) -> float:
    """Histogram threshold maximizing between-class variance; returns the bin
    edge, ties broken toward the lower threshold."""
    data = vol.data if isinstance(vol, Volume3D) else np.asarray(vol)
    lo = float(data.min())
    hi = float(data.max())
    if lo == hi:
        raise ValueError("cannot threshold a constant volume")
    counts, edges = np.histogram(data.reshape(-1), bins=histogram_bins, range=(lo, hi))
    counts = counts.astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])

    w0 = np.cumsum(counts)[:-1]            # mass of bins 0..k
    w1 = counts.sum() - w0
    mass = np.cumsum(counts * centers)[:-1]
    total = (counts * centers).sum()
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.where(valid, mass / np.where(w0 > 0, w0, 1.0), 0.0)
    mu1 = np.where(valid, (total - mass) / np.where(w1 > 0, w1, 1.0), 0.0)
    sigma_b = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    best = int(np.argmax(sigma_b))  # argmax takes the first (lowest) maximum
    return float(edges[best + 1])


def _as_bool_mask(mask, foreground=None) -> np.ndarray:
    if isinstance(mask, LabelVolume):
        data = mask.data
    elif isinstance(mask, Volume3D):
        data = mask.data
    else:
        data = np.asarray(mask)
    if foreground is None:
        return data.astype(bool)
    return data == foreground


def connected_components(mask, foreground=None,
                         conn: Connectivity = Connectivity.N6):
    """Label connected components of a binary mask.

    Returns (labels, sizes): labels is an int32 array with component ids
    1..n ordered by decreasing size, ties broken by the component's smallest
    voxel in (i, j, k) lexicographic order; sizes[c-1] is the voxel count of
    component c.
    """
    fg = _as_bool_mask(mask, foreground)
    raw, n = ndimage.label(fg, structure=connectivity_structure(conn))
    if n == 0:
        return np.zeros(fg.shape, np.int32), []
    sizes = np.bincount(raw.reshape(-1))[1:]
    flat_seed = np.full(n + 1, np.iinfo(np.int64).max, np.int64)
    # first occurrence in C order of [i,j,k] arrays = lexicographic (i,j,k)
    flat = raw.reshape(-1)
    occupied = np.flatnonzero(flat)
    np.minimum.at(flat_seed, flat[occupied], occupied)
    order = sorted(range(1, n + 1), key=lambda c: (-int(sizes[c - 1]), int(flat_seed[c])))
    remap = np.zeros(n + 1, np.int32)
    for new_id, old_id in enumerate(order, start=1):
        remap[old_id] = new_id
    return remap[raw], [int(sizes[c - 1]) for c in order]


def morphological_close(mask, element: StructuringElement = StructuringElement.STAR6,
                        iterations: int = 1) -> np.ndarray:
    """iterations x (dilate then erode) with the 6-neighborhood star.

    Erosion treats the outside of the volume as foreground so the closing is
    extensive: output is a superset of the input.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    out = _as_bool_mask(mask)
    structure = _element_structure(element)
    for _ in range(iterations):
        out = ndimage.binary_dilation(out, structure=structure)
        out = ndimage.binary_erosion(out, structure=structure, border_value=1)
    return out


def fill_holes_3d(mask) -> np.ndarray:
    """Set to foreground every background component that does not touch the
    volume boundary (N6 connectivity)."""
    fg = _as_bool_mask(mask)
    bg_labels, n = ndimage.label(~fg, structure=connectivity_structure(Connectivity.N6))
    if n == 0:
        return fg.copy()
    boundary = np.zeros(fg.shape, bool)
    boundary[0, :, :] = boundary[-1, :, :] = True
    boundary[:, 0, :] = boundary[:, -1, :] = True
    boundary[:, :, 0] = boundary[:, :, -1] = True
    touching = np.unique(bg_labels[boundary & ~fg])
    keep_open = np.zeros(n + 1, bool)
    keep_open[touching] = True
    keep_open[0] = True
    return fg | ~keep_open[bg_labels]


def edge_voxels(mask) -> np.ndarray:
    """Foreground voxels with at least one in-bounds N6 background neighbor."""
    fg = _as_bool_mask(mask)
    eroded = ndimage.binary_erosion(
        fg, structure=connectivity_structure(Connectivity.N6), border_value=1)
    return fg & ~eroded
