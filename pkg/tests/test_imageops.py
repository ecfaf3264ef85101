from collections import deque

import numpy as np
import pytest

from lungvessel.imageops import (
    StructuringElement,
    connected_components,
    downsample_17,
    edge_voxels,
    farid_gradient,
    fill_holes_3d,
    gaussian_kernel1d,
    gaussian_smooth,
    hessian_at,
    hessian_field,
    morphological_close,
    otsu_threshold,
    pyramid_dims,
)
from lungvessel.volume import Connectivity, Volume3D, neighbors


def vol(data):
    return Volume3D(np.asarray(data, np.float32))


# -- oracles -----------------------------------------------------------------

def otsu_bruteforce(data, bins):
    """Exhaustive scan over all bin edges maximizing between-class variance."""
    lo, hi = float(data.min()), float(data.max())
    counts, edges = np.histogram(data.reshape(-1), bins=bins, range=(lo, hi))
    best_var, best_edge = -1.0, None
    for k in range(1, bins):
        w0 = counts[:k].sum()
        w1 = counts[k:].sum()
        if w0 == 0 or w1 == 0:
            continue
        centers = 0.5 * (edges[:-1] + edges[1:])
        mu0 = (counts[:k] * centers[:k]).sum() / w0
        mu1 = (counts[k:] * centers[k:]).sum() / w1
        var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_var, best_edge = var, edges[k]
    return best_edge


def flood_fill_components(mask, conn):
    """Independent BFS labeling oracle."""
    mask = np.asarray(mask, bool)
    seen = np.zeros(mask.shape, bool)
    comps = []
    for start in map(tuple, np.argwhere(mask)):
        if seen[start]:
            continue
        q = deque([start])
        seen[start] = True
        comp = []
        while q:
            cur = q.popleft()
            comp.append(cur)
            for nb in neighbors(cur, conn, mask.shape):
                if mask[nb] and not seen[nb]:
                    seen[nb] = True
                    q.append(nb)
        comps.append(comp)
    return comps


# -- gaussian ----------------------------------------------------------------

def test_gaussian_preserves_constant():
    v = vol(np.full((9, 9, 9), -1000.0))
    out = gaussian_smooth(v, 1.3)
    assert np.allclose(out.data, -1000.0, rtol=1e-5)


def test_gaussian_impulse_matches_kernel():
    data = np.zeros((11, 11, 11), np.float32)
    data[5, 5, 5] = 1.0
    out = gaussian_smooth(vol(data), 1.0)
    k = gaussian_kernel1d(1.0)
    assert out.data[5, 5, 5] == pytest.approx(k[len(k) // 2] ** 3, rel=1e-5)
    assert out.data.sum() == pytest.approx(1.0, abs=1e-6)


def test_gaussian_sigma_zero_identity():
    data = np.random.default_rng(0).normal(size=(6, 6, 6)).astype(np.float32)
    v = vol(data)
    out = gaussian_smooth(v, 0.0)
    assert np.array_equal(out.data, data)


def test_gaussian_rejects_negative_sigma():
    with pytest.raises(ValueError):
        gaussian_smooth(vol(np.zeros((5, 5, 5))), -0.1)


def test_gaussian_preserves_mean():
    # interior-dominated: structure away from the faces, flat boundary region
    data = np.full((16, 16, 16), -800.0, np.float32)
    rng = np.random.default_rng(3)
    data[4:12, 4:12, 4:12] += rng.normal(300.0, 100.0, size=(8, 8, 8))
    out = gaussian_smooth(vol(data), 1.5)
    assert out.data.mean() == pytest.approx(data.mean(), rel=1e-4)


# -- derivatives -------------------------------------------------------------

def test_gradient_of_ramp():
    i = np.arange(12, dtype=np.float32)
    data = np.broadcast_to(2.0 * i[:, None, None], (12, 12, 12)).copy()
    g = farid_gradient(vol(data)).data
    interior = g[4:-4, 4:-4, 4:-4]
    assert np.allclose(interior[..., 0], 2.0, atol=1e-4)
    assert np.allclose(interior[..., 1], 0.0, atol=1e-4)
    assert np.allclose(interior[..., 2], 0.0, atol=1e-4)


def test_gradient_of_ramp_along_y():
    j = np.arange(12, dtype=np.float32)
    data = np.broadcast_to(2.0 * j[None, :, None], (12, 12, 12)).copy()
    g = farid_gradient(vol(data)).data
    interior = g[4:-4, 4:-4, 4:-4]
    assert np.allclose(interior[..., 1], 2.0, atol=1e-4)
    assert np.allclose(interior[..., 0], 0.0, atol=1e-4)


def test_gradient_of_constant_exactly_zero():
    g = farid_gradient(vol(np.full((8, 8, 8), 123.0))).data
    assert np.all(g == 0.0)


def test_gradient_needs_support():
    with pytest.raises(ValueError):
        farid_gradient(vol(np.zeros((4, 8, 8))))


def test_hessian_of_quadratic():
    i = np.arange(13, dtype=np.float64)
    data = np.broadcast_to((i ** 2)[:, None, None], (13, 13, 13)).copy()
    H = hessian_at(vol(data), (6, 6, 6))
    assert np.allclose(H, np.diag([2.0, 0.0, 0.0]), atol=1e-3)


def test_hessian_mixed_term():
    i = np.arange(13, dtype=np.float64)
    data = i[:, None, None] * i[None, :, None] * np.ones((1, 1, 13))
    H = hessian_at(vol(data), (6, 6, 6))
    expected = np.zeros((3, 3))
    expected[0, 1] = expected[1, 0] = 1.0
    assert np.allclose(H, expected, atol=1e-3)


def test_hessian_of_constant_is_zero():
    H = hessian_at(vol(np.full((12, 12, 12), -500.0)), (6, 6, 6))
    assert np.allclose(H, 0.0, atol=1e-9)


def test_hessian_symmetric_and_matches_field():
    rng = np.random.default_rng(5)
    data = rng.normal(size=(14, 14, 14)).astype(np.float32)
    v = vol(data)
    H = hessian_at(v, (7, 6, 7))
    assert np.array_equal(H, H.T)
    field = hessian_field(v)
    packed = field[7, 6, 7]
    flat = np.array([H[0, 0], H[0, 1], H[0, 2], H[1, 1], H[1, 2], H[2, 2]])
    assert np.allclose(packed, flat, atol=1e-4)


def test_hessian_rejects_border_index():
    with pytest.raises(ValueError):
        hessian_at(vol(np.zeros((12, 12, 12))), (2, 6, 6))


# -- pyramid -----------------------------------------------------------------

def test_downsample_dims():
    assert pyramid_dims((17, 17, 17)) == (10, 10, 10)
    v = downsample_17(vol(np.zeros((17, 17, 17))))
    assert v.dims == (10, 10, 10)
    assert v.spacing == pytest.approx((1.7, 1.7, 1.7))


def test_downsample_constant():
    v = downsample_17(vol(np.full((12, 14, 10), 37.0)))
    assert np.allclose(v.data, 37.0, atol=1e-3)


def test_downsample_ramp_slope():
    i = np.arange(24, dtype=np.float32)
    data = np.broadcast_to(i[:, None, None], (24, 24, 24)).copy()
    out = downsample_17(vol(data))
    # slope in index space scales by 1.7 -> equal in physical space
    mid = out.data[3:-3, 5, 5]
    slopes = np.diff(mid)
    assert np.allclose(slopes, 1.7, rtol=0.02)


# -- otsu --------------------------------------------------------------------

def test_otsu_bimodal_separates_modes():
    data = np.concatenate([np.full(500, -900.0), np.full(500, 50.0)])
    rng = np.random.default_rng(1)
    rng.shuffle(data)
    t = otsu_threshold(vol(data.reshape(10, 10, 10)))
    assert -900.0 < t < 50.0


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_otsu_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(-800, 60, size=600)
    b = rng.normal(40, 80, size=400)
    data = np.concatenate([a, b]).astype(np.float32).reshape(10, 10, 10)
    bins = 64
    assert otsu_threshold(vol(data), bins) == pytest.approx(
        otsu_bruteforce(data, bins))


def test_otsu_constant_rejected():
    with pytest.raises(ValueError):
        otsu_threshold(vol(np.zeros((4, 4, 4))))


# -- connected components ----------------------------------------------------

def test_two_cubes_two_components():
    mask = np.zeros((10, 10, 10), bool)
    mask[1:3, 1:3, 1:3] = True
    mask[6:8, 6:8, 6:8] = True
    labels, sizes = connected_components(mask)
    assert sizes == [8, 8]
    assert labels.max() == 2


def test_diagonal_cubes_connectivity_semantics():
    mask = np.zeros((8, 8, 8), bool)
    mask[1:3, 1:3, 1:3] = True
    mask[3:5, 3:5, 3:5] = True  # touch at a corner only
    _, sizes6 = connected_components(mask, conn=Connectivity.N6)
    _, sizes26 = connected_components(mask, conn=Connectivity.N26)
    assert len(sizes6) == 2
    assert len(sizes26) == 1


@pytest.mark.parametrize("seed,conn", [(0, Connectivity.N6), (1, Connectivity.N26),
                                       (5, Connectivity.N6)])
def test_components_match_bfs_oracle(seed, conn):
    rng = np.random.default_rng(seed)
    mask = rng.random((9, 9, 9)) < 0.3
    labels, sizes = connected_components(mask, conn=conn)
    oracle = flood_fill_components(mask, conn)
    assert len(sizes) == len(oracle)
    assert sorted(sizes, reverse=True) == sorted((len(c) for c in oracle), reverse=True)
    # partition property: each oracle component maps to exactly one label
    for comp in oracle:
        ids = {int(labels[v]) for v in comp}
        assert len(ids) == 1 and 0 not in ids
    assert sum(sizes) == int(mask.sum())


def test_components_deterministic_ordering():
    mask = np.zeros((10, 10, 10), bool)
    mask[7:9, 7:9, 7:9] = True   # size 8, later seed
    mask[0:2, 0:2, 0:3] = True   # size 12, earlier seed
    mask[4, 4, 4] = True         # size 1
    labels, sizes = connected_components(mask)
    assert sizes == [12, 8, 1]
    assert labels[0, 0, 0] == 1
    assert labels[7, 7, 7] == 2
    assert labels[4, 4, 4] == 3


# -- morphology --------------------------------------------------------------

def test_close_solid_cube_unchanged():
    mask = np.zeros((10, 10, 10), bool)
    mask[2:8, 2:8, 2:8] = True
    out = morphological_close(mask, StructuringElement.STAR6, 1)
    assert np.array_equal(out, mask)


def test_close_restores_interior_voxel():
    mask = np.zeros((9, 9, 9), bool)
    mask[2:7, 2:7, 2:7] = True
    mask[4, 4, 4] = False
    out = morphological_close(mask, StructuringElement.STAR6, 1)
    assert out[4, 4, 4]


def test_close_gap_bridging_matches_manual_trace():
    # Hand-traced dilate/erode: two isolated voxels with a one-voxel gap do
    # NOT bridge (the midpoint lacks lateral support after dilation), while
    # two parallel planes two apart do.
    mask = np.zeros((9, 9, 9), bool)
    mask[3, 4, 4] = True
    mask[5, 4, 4] = True
    out = morphological_close(mask, StructuringElement.STAR6, 1)
    assert not out[4, 4, 4]
    assert np.array_equal(out, mask)

    planes = np.zeros((9, 9, 9), bool)
    planes[3, :, :] = True
    planes[5, :, :] = True
    out = morphological_close(planes, StructuringElement.STAR6, 1)
    assert out[4, :, :].all()


def test_close_is_extensive():
    rng = np.random.default_rng(2)
    mask = rng.random((12, 12, 12)) < 0.2
    out = morphological_close(mask, StructuringElement.STAR6, 3)
    assert np.all(out[mask])


# -- hole filling ------------------------------------------------------------

def test_fill_hollow_cube():
    mask = np.zeros((10, 10, 10), bool)
    mask[2:8, 2:8, 2:8] = True
    hollow = mask.copy()
    hollow[3:7, 3:7, 3:7] = False
    assert np.array_equal(fill_holes_3d(hollow), mask)


def test_open_channel_not_filled():
    mask = np.zeros((10, 10, 10), bool)
    mask[2:8, 2:8, 2:8] = True
    mask[3:7, 3:7, 3:7] = False       # cavity
    mask[4, 4, 0:4] = False           # channel from cavity to the boundary
    filled = fill_holes_3d(mask)
    # oracle: BFS from boundary over background must reach the cavity
    assert not filled[4, 4, 4]
    assert np.array_equal(fill_holes_3d(filled), filled)  # idempotent


def test_fill_empty_mask():
    mask = np.zeros((5, 5, 5), bool)
    assert not fill_holes_3d(mask).any()


def test_edge_voxels_on_cube():
    mask = np.zeros((8, 8, 8), bool)
    mask[2:6, 2:6, 2:6] = True
    edges = edge_voxels(mask)
    assert edges.sum() == 4 ** 3 - 2 ** 3
