import numpy as np
import pytest

from lungvessel.phantom import (
    NoiseSpec,
    TubeSpec,
    add_gaussian_noise,
    branching_tree_spec,
    build_phantom,
    rasterize_tubes,
)
from lungvessel.volume import Volume3D


def test_cylinder_volume_matches_analytic():
    r = 3.0
    tube = TubeSpec(np.array([[24.0, 24.0, 5.0], [24.0, 24.0, 55.0]]),
                    np.array([r, r]), hu=100.0)
    res = rasterize_tubes([tube], (48, 48, 64))

    # brute-force point-to-segment distance oracle over the whole grid
    ii, jj, kk = np.meshgrid(*map(np.arange, (48, 48, 64)), indexing="ij")
    z = np.clip(kk, 5.0, 55.0)
    dist = np.sqrt((ii - 24.0) ** 2 + (jj - 24.0) ** 2 + (kk - z) ** 2)
    oracle = dist <= r
    assert np.array_equal(res.truth.data == 4, oracle)

    # cylindrical body (away from the spherical end caps) matches pi*r^2*L
    body = res.truth.data[:, :, 8:52] == 4
    assert body.sum() == pytest.approx(np.pi * r * r * 44.0, rel=0.03)


def test_bifurcation_has_one_branch_point():
    trunk = TubeSpec(np.array([[20.0, 20.0, 4.0], [20.0, 20.0, 20.0]]),
                     np.array([2.0, 2.0]), hu=0.0)
    left = TubeSpec(np.array([[20.0, 20.0, 20.0], [12.0, 20.0, 34.0]]),
                    np.array([2.0, 2.0]), hu=0.0)
    right = TubeSpec(np.array([[20.0, 20.0, 20.0], [28.0, 20.0, 34.0]]),
                     np.array([2.0, 2.0]), hu=0.0)
    res = rasterize_tubes([trunk, left, right], (40, 40, 40))
    # ground-truth branch point: the shared control point appears in all
    # three sampled centerlines
    shared = np.array([20.0, 20.0, 20.0])
    hits = sum(np.min(np.linalg.norm(c - shared, axis=1)) < 0.6
               for c in res.centerlines)
    assert hits == 3


def test_zero_tubes_pure_background():
    res = rasterize_tubes([], (10, 10, 10), background_hu=-777.0)
    assert np.all(res.volume.data == -777.0)
    assert not res.truth.data.any()


def test_tube_out_of_bounds_rejected():
    tube = TubeSpec(np.array([[5.0, 5.0, -20.0], [5.0, 5.0, 5.0]]),
                    np.array([2.0, 2.0]), hu=0.0)
    with pytest.raises(ValueError, match="bounds"):
        rasterize_tubes([tube], (10, 10, 10))


def test_rasterize_order_independent_for_disjoint_tubes():
    a = TubeSpec(np.array([[8.0, 8.0, 4.0], [8.0, 8.0, 28.0]]),
                 np.array([2.0, 2.0]), hu=50.0)
    b = TubeSpec(np.array([[24.0, 24.0, 4.0], [24.0, 24.0, 28.0]]),
                 np.array([2.5, 2.5]), hu=80.0)
    r1 = rasterize_tubes([a, b], (32, 32, 32))
    r2 = rasterize_tubes([b, a], (32, 32, 32))
    assert np.array_equal(r1.volume.data, r2.volume.data)
    assert np.array_equal(r1.truth.data, r2.truth.data)


def test_noise_zero_std_identity():
    vol = Volume3D(np.zeros((6, 6, 6), np.float32))
    out = add_gaussian_noise(vol, NoiseSpec(0.0, 42))
    assert np.array_equal(out.data, vol.data)


def test_noise_std_and_mean():
    vol = Volume3D(np.zeros((64, 64, 64), np.float32))
    out = add_gaussian_noise(vol, NoiseSpec(40.0, 3))
    assert out.data.std() == pytest.approx(40.0, rel=0.02)
    n = out.data.size
    assert abs(out.data.mean()) < 3 * 40.0 / np.sqrt(n)


def test_noise_reproducible_from_seed():
    vol = Volume3D(np.zeros((8, 8, 8), np.float32))
    a = add_gaussian_noise(vol, NoiseSpec(25.0, 9))
    b = add_gaussian_noise(vol, NoiseSpec(25.0, 9))
    assert np.array_equal(a.data, b.data)
    c = add_gaussian_noise(vol, NoiseSpec(25.0, 10))
    assert not np.array_equal(a.data, c.data)


def test_bundled_tree_spec_builds():
    spec = branching_tree_spec()
    res = build_phantom(spec)
    assert res.volume.dims == (128, 128, 128)
    assert (res.truth.data == 4).sum() > 4000
    assert len(res.centerlines) == 7  # trunk + 2 + 4
