"""Multi-scale, multi-radius offset-medialness vessel enhancement.

At each pyramid level the volume is smoothed, the Hessian eigenframe is
computed, and voxels whose two leading eigenvalues are negative (bright tube
on dark background) are scored by sampling the boundary-gradient projection
on circles of several radii in the cross-section plane. A symmetry factor
built from the median absolute deviation of the circle samples suppresses
responses at isolated edges, and the gradient magnitude at the voxel itself
suppresses responses on vessel borders. The final response is the maximum
over all levels and radii, mapped back to the full-resolution grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imageops import (
    PYRAMID_FACTOR,
    downsample_17,
    farid_gradient,
    gaussian_smooth,
    hessian_field,
    GradientField,
)
from .volume import Connectivity, LabelVolume, Volume3D, connectivity_structure


@dataclass(frozen=True)
class FilterConfig:
    n_scales: int = 4
    pyramid_factor: float = PYRAMID_FACTOR
    radii: tuple[float, ...] = (1.0, 1.3, 1.6, 1.9)
    symmetry_exponent: float = 1.5
    response_floor: float = 0.05  # fraction of the 99.9th percentile response

    def __post_init__(self):
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise ValueError("radii must be strictly increasing")


@dataclass(frozen=True)
class EigenFrame:
    """Eigen decomposition of a symmetric 3x3 matrix, ordered |e1|>=|e2|>=|e3|.

    v3 (the eigenvector of the smallest-magnitude eigenvalue) estimates the
    local tube direction.
    """

    eigenvalues: np.ndarray   # (3,)
    eigenvectors: np.ndarray  # (3, 3), columns v1, v2, v3

    @property
    def v1(self):
        return self.eigenvectors[:, 0]

    @property
    def v2(self):
        return self.eigenvectors[:, 1]

    @property
    def v3(self):
        return self.eigenvectors[:, 2]


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip eigenvector signs so each vector's largest-magnitude component is
    positive. vectors has shape (..., 3, 3) with eigenvectors in columns."""
    comp = np.argmax(np.abs(vectors), axis=-2)  # (..., 3) component index per column
    picked = np.take_along_axis(vectors, comp[..., None, :], axis=-2)[..., 0, :]
    flip = np.where(picked < 0, -1.0, 1.0)
    return vectors * flip[..., None, :]


def eigen_symmetric3(H: np.ndarray) -> EigenFrame:
    """Eigen decomposition of one symmetric 3x3 matrix with deterministic
    ordering (by |eigenvalue|, descending) and sign convention."""
    H = np.asarray(H, np.float64)
    if H.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {H.shape}")
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    order = np.argsort(-np.abs(w), kind="stable")
    w = w[order]
    V = V[:, order]
    V = _canonical_signs(V)
    return EigenFrame(w, V)


def _eigen_batch(Hmats: np.ndarray):
    """Batched eigh for (m, 3, 3) symmetric matrices, same conventions as
    eigen_symmetric3. Returns (eigvals (m,3), eigvecs (m,3,3))."""
    w, V = np.linalg.eigh(Hmats)
    order = np.argsort(-np.abs(w), axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    return w, _canonical_signs(V)


def boundary_gradient(vol_sigma: Volume3D, sigma: float) -> GradientField:
    """Scale-weighted gradient of an already-smoothed volume: sigma * grad."""
    g = farid_gradient(vol_sigma)
    return GradientField(g.data * np.float32(sigma), g.spacing)


def circle_sample_count(radius: float) -> int:
    """Number of boundary samples on a circle of the given radius."""
    return int(np.floor(2.0 * np.pi * radius + 1.0))


def _interp_vec(field: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear samples of a (nx,ny,nz,3) field at (m,3) positions."""
    coords = pts.T
    return np.stack([
        ndimage.map_coordinates(field[..., c], coords, order=1, mode="nearest")
        for c in range(3)
    ], axis=-1)


def _circle_responses(centers, v1, v2, B_data, radius):
    """Median and MAD of |B(x + r*v_alpha) . v_alpha| over the sample circle.

    centers: (m, 3) float voxel positions; v1, v2: (m, 3) in-plane unit
    vectors; B_data: (nx,ny,nz,3). Returns (median, mad) arrays of shape (m,).
    """
    n = circle_sample_count(radius)
    m = centers.shape[0]
    samples = np.empty((n, m), np.float32)
    for i in range(1, n + 1):
        ang = 2.0 * np.pi * i / n
        dirv = np.cos(ang) * v1 + np.sin(ang) * v2  # (m, 3)
        pts = centers + radius * dirv
        Bs = _interp_vec(B_data, pts)
        samples[i - 1] = np.abs(np.einsum("md,md->m", Bs, dirv)).astype(np.float32)
    med = np.median(samples, axis=0)
    mad = np.median(np.abs(samples - med[None, :]), axis=0)
    return med, mad


def medialness_at(x, frame: EigenFrame, B: GradientField, radius: float,
                  sigma: float = 1.0,
                  symmetry_exponent: float = 1.5) -> float:
    """Offset-medialness response at one voxel.

    Returns 0 when the eigenvalue gate (e1 < 0 and e2 < 0) fails. The circle
    samples are trilinear interpolations of the boundary-gradient field; the
    response is median * symmetry^(3/2) minus the central gradient magnitude,
    clamped at 0.
    """
    e = frame.eigenvalues
    if not (e[0] < 0 and e[1] < 0):
        return 0.0
    center = np.asarray(x, np.float64)[None, :]
    v1 = frame.v1[None, :].astype(np.float64)
    v2 = frame.v2[None, :].astype(np.float64)
    med, mad = _circle_responses(center, v1, v2, B.data, radius)
    med, mad = float(med[0]), float(mad[0])
    if med <= 0:
        return 0.0
    symmetry = min(max(1.0 - mad / med, 0.0), 1.0)
    response = med * symmetry ** symmetry_exponent
    b_center = _interp_vec(B.data, center)[0]
    penalty = float(np.sqrt((b_center ** 2).sum()))
    return max(response - penalty, 0.0)


@dataclass(frozen=True)
class MedialnessField:
    """Maximum medialness over scales and radii on the full-resolution grid,
    with argmax metadata and the tube-direction estimate."""

    response: np.ndarray      # (nx,ny,nz) float32, >= 0
    scale_index: np.ndarray   # (nx,ny,nz) uint8
    radius_index: np.ndarray  # (nx,ny,nz) uint8
    direction: np.ndarray     # (nx,ny,nz,3) float32 unit vectors where response>0
    config: FilterConfig
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def dims(self):
        return self.response.shape

    def radius_voxels(self) -> np.ndarray:
        """Winning radius per voxel expressed in the winning level's voxels,
        converted to full-resolution voxel units."""
        radii = np.asarray(self.config.radii, np.float32)
        factors = self.config.pyramid_factor ** np.arange(
            self.config.n_scales, dtype=np.float32)
        return radii[self.radius_index] * factors[self.scale_index]

    def nms_threshold(self) -> float:
        """Response floor used by non-maximum suppression: the configured
        fraction of the 99.9th percentile of positive responses."""
        pos = self.response[self.response > 0]
        if pos.size == 0:
            return 0.0
        return float(self.config.response_floor * np.percentile(pos, 99.9))


def _center_reference(data: np.ndarray) -> float:
    """Integer intensity reference subtracted before filtering, so that an
    integer offset added to the volume cancels exactly."""
    return float(np.round(np.median(data)))


def _sample_mask_at_level(mask: np.ndarray, level_dims, factor: float) -> np.ndarray:
    coords = np.meshgrid(*[np.arange(n, dtype=np.float64) * factor
                           for n in level_dims], indexing="ij")
    return ndimage.map_coordinates(mask.astype(np.uint8), coords,
                                   order=0, mode="nearest").astype(bool)


def _hessian_z_window(vol: Volume3D, zlo: int, zhi: int) -> np.ndarray:
    """Hessian entries for level z in [zlo, zhi), computed on a z-slab with
    enough margin that the result equals a full-volume computation."""
    nz = vol.dims[2]
    lo = max(min(zlo - 2, nz - 5), 0)
    hi = min(max(zhi + 2, lo + 5), nz)
    sub = Volume3D(vol.data[:, :, lo:hi], vol.spacing, vol.origin)
    H = hessian_field(sub)
    return H[:, :, zlo - lo:zlo - lo + (zhi - zlo)]


def run_filter(vol: Volume3D, lungs, airway_mask=None,
               cfg: FilterConfig = FilterConfig(),
               tile_z: int = 0) -> MedialnessField:
    """Evaluate the multi-scale medialness filter inside the lung masks.

    lungs may be a LungLabels-style LabelVolume (labels 2/3), a boolean mask,
    or None for the whole volume. airway_mask voxels are excluded after a
    1-voxel dilation. tile_z > 0 processes the volume in z slabs of that
    thickness; the result is identical to the untiled run.
    """
    dims = vol.dims
    if isinstance(lungs, LabelVolume):
        allowed = (lungs.data == 2) | (lungs.data == 3)
    elif lungs is None:
        allowed = np.ones(dims, bool)
    else:
        allowed = np.asarray(lungs, bool)
    if allowed.shape != dims:
        raise ValueError("lung mask dims do not match the volume")
    if airway_mask is not None:
        aw = airway_mask.data > 0 if isinstance(airway_mask, LabelVolume) \
            else np.asarray(airway_mask, bool)
        if aw.shape != dims:
            raise ValueError("airway mask dims do not match the volume")
        aw = ndimage.binary_dilation(
            aw, structure=connectivity_structure(Connectivity.N6))
        allowed = allowed & ~aw

    ref = _center_reference(vol.data)
    base = Volume3D((vol.data.astype(np.int64) - int(ref)).astype(np.float32)
                    if np.issubdtype(vol.data.dtype, np.integer)
                    else (vol.data.astype(np.float64) - ref).astype(np.float32),
                    vol.spacing, vol.origin)

    # per-level global fields
    level_vols = [base]
    for _ in range(1, cfg.n_scales):
        level_vols.append(downsample_17(level_vols[-1]))
    smoothed = [gaussian_smooth(v, 1.0) for v in level_vols]
    bfields = [boundary_gradient(s, 1.0) for s in smoothed]
    bmags = [b.magnitude() for b in bfields]
    factors = [cfg.pyramid_factor ** lev for lev in range(cfg.n_scales)]
    masks = [allowed if lev == 0 else
             _sample_mask_at_level(allowed, level_vols[lev].dims, factors[lev])
             for lev in range(cfg.n_scales)]

    level_resp = [np.zeros(v.dims, np.float32) for v in level_vols]
    level_rad = [np.zeros(v.dims, np.uint8) for v in level_vols]
    level_dir = [np.zeros(v.dims + (3,), np.float32) for v in level_vols]

    nz = dims[2]
    step = tile_z if tile_z and tile_z > 0 else nz
    tiles = [(z0, min(z0 + step, nz)) for z0 in range(0, nz, step)]
    next_z = [0] * cfg.n_scales

    for z0, z1 in tiles:
        for lev in range(cfg.n_scales):
            lnz = level_vols[lev].dims[2]
            lz0 = int(np.floor(z0 / factors[lev]))
            lz1 = min(int(np.floor((z1 - 1) / factors[lev])) + 2, lnz)
            lz0 = max(lz0, next_z[lev])
            if lz0 >= lz1:
                continue
            next_z[lev] = lz1
            _evaluate_level_slab(
                smoothed[lev], bfields[lev], bmags[lev], masks[lev],
                lz0, lz1, cfg,
                level_resp[lev], level_rad[lev], level_dir[lev])

    # combine levels on the full-resolution grid
    response = np.zeros(dims, np.float32)
    scale_index = np.zeros(dims, np.uint8)
    radius_index = np.zeros(dims, np.uint8)
    direction = np.zeros(dims + (3,), np.float32)
    full_coords = None
    for lev in range(cfg.n_scales):
        if lev == 0:
            up = level_resp[0]
            rad_up = level_rad[0]
            dir_up = level_dir[0]
        else:
            if full_coords is None:
                full_coords = np.meshgrid(
                    *[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
            coords = [c / factors[lev] for c in full_coords]
            up = ndimage.map_coordinates(level_resp[lev], coords, order=1,
                                         mode="nearest")
            rad_up = ndimage.map_coordinates(level_rad[lev], coords, order=0,
                                             mode="nearest")
            dir_up = np.stack([
                ndimage.map_coordinates(level_dir[lev][..., c], coords, order=0,
                                        mode="nearest")
                for c in range(3)], axis=-1)
        win = up > response
        response[win] = up[win]
        scale_index[win] = lev
        radius_index[win] = rad_up[win]
        direction[win] = dir_up[win]

    outside = ~allowed
    response[outside] = 0.0
    zero = response == 0
    scale_index[zero] = 0
    radius_index[zero] = 0
    direction[zero] = 0.0
    return MedialnessField(response, scale_index, radius_index, direction,
                           cfg, vol.spacing, vol.origin)


def _evaluate_level_slab(smoothed: Volume3D, B: GradientField, bmag, mask,
                         lz0: int, lz1: int, cfg: FilterConfig,
                         out_resp, out_rad, out_dir) -> None:
    """Fill the per-level response/radius/direction arrays for level z in
    [lz0, lz1). Reads only global level fields, so results are independent of
    how the z range is partitioned."""
    if min(smoothed.dims) < 5:
        return
    H = _hessian_z_window(smoothed, lz0, lz1)
    sub_mask = mask[:, :, lz0:lz1]
    # necessary condition for e1<0 and e2<0: negative trace
    trace = H[..., 0] + H[..., 3] + H[..., 5]
    cand = sub_mask & (trace < 0)
    if not np.any(cand):
        return
    idx = np.argwhere(cand)
    Hm = np.empty((len(idx), 3, 3), np.float64)
    hvals = H[cand]
    Hm[:, 0, 0] = hvals[:, 0]
    Hm[:, 0, 1] = Hm[:, 1, 0] = hvals[:, 1]
    Hm[:, 0, 2] = Hm[:, 2, 0] = hvals[:, 2]
    Hm[:, 1, 1] = hvals[:, 3]
    Hm[:, 1, 2] = Hm[:, 2, 1] = hvals[:, 4]
    Hm[:, 2, 2] = hvals[:, 5]
    w, V = _eigen_batch(Hm)
    gate = (w[:, 0] < 0) & (w[:, 1] < 0)
    if not np.any(gate):
        return
    idx = idx[gate]
    V = V[gate]
    centers = idx.astype(np.float64)
    centers[:, 2] += lz0
    v1 = V[:, :, 0]
    v2 = V[:, :, 1]
    v3 = V[:, :, 2]
    penalty = bmag[centers[:, 0].astype(np.intp),
                   centers[:, 1].astype(np.intp),
                   centers[:, 2].astype(np.intp)]

    best = np.zeros(len(idx), np.float32)
    best_rad = np.zeros(len(idx), np.uint8)
    for ri, radius in enumerate(cfg.radii):
        med, mad = _circle_responses(centers, v1, v2, B.data, radius)
        symmetry = np.zeros_like(med)
        pos = med > 0
        symmetry[pos] = np.clip(1.0 - mad[pos] / med[pos], 0.0, 1.0)
        resp = np.maximum(
            med * symmetry ** np.float32(cfg.symmetry_exponent) - penalty, 0.0
        ).astype(np.float32)
        win = resp > best
        best[win] = resp[win]
        best_rad[win] = ri

    keep = best > 0
    ii, jj, kk = idx[keep, 0], idx[keep, 1], idx[keep, 2] + lz0
    out_resp[ii, jj, kk] = best[keep]
    out_rad[ii, jj, kk] = best_rad[keep]
    out_dir[ii, jj, kk] = v3[keep].astype(np.float32)
