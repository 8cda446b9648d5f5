import numpy as np
import pytest

from bevsplat.camera import build_frustum, make_bins
from bevsplat.multiscale import (
    fuse,
    fuse_adjoint,
    interp_matrix,
    render_fused,
    render_multiscale,
    scale_grids,
    scaled_eps,
    upsample,
    upsample_adjoint,
)
from bevsplat.rasterizer import BevFeatureMap, BevGrid, project_gaussians, splat_forward
from bevsplat.uncertainty import lift_camera

from conftest import random_camera


def _fmap(values):
    values = np.asarray(values, dtype=np.float64)
    return BevFeatureMap(values, values.sum(axis=0), {})


@pytest.fixture(scope="module")
def gaussians():
    rng = np.random.default_rng(3)
    cam = random_camera(rng, (32, 48))
    fr = build_frustum(cam, make_bins(1.0, 40.0, 16), 8)
    h, w, B = fr.shape
    return lift_camera(rng.normal(size=(B, h, w)), rng.normal(size=(h, w)), rng.normal(size=(3, h, w)), fr)


def test_cell_sizes():
    grids = scale_grids(BevGrid.square(50.0, 200), [50, 100, 200])
    assert [(1 / g.scale_row, 1 / g.scale_col) for g in grids] == [(2.0, 2.0), (1.0, 1.0), (0.5, 0.5)]


def test_scaled_eps():
    g = BevGrid.square(50, 50)
    assert scaled_eps(1.0, g, 200) == pytest.approx(1 / 16)
    assert scaled_eps(0.3, BevGrid.square(50, 200), 200) == 0.3


def test_single_scale_matches_direct(gaussians):
    grid = BevGrid.square(50.0, 100)
    maps, _ = render_multiscale(gaussians, [grid], 1.0, eps=1e-4)
    batch = project_gaussians(gaussians.mu3d, gaussians.cov3d, gaussians.opacity, grid, 1.0, 1e-4)
    direct = splat_forward(batch, gaussians.features)
    assert maps[0].values.tobytes() == direct.values.tobytes()
    fused, _ = render_fused(gaussians, [grid], 1.0, eps=1e-4)
    assert fused.values.tobytes() == direct.values.tobytes()


def test_mismatched_extent_rejected(gaussians):
    with pytest.raises(ValueError):
        render_multiscale(gaussians, [BevGrid.square(50, 50), BevGrid.square(40, 100)], 1.0)
    with pytest.raises(ValueError):
        render_multiscale(gaussians, [], 1.0)


@pytest.mark.parametrize("mode", ["bilinear", "nearest"])
def test_constant_preserved(mode):
    up = upsample(_fmap(np.full((2, 5, 5), 3.25)), 20, mode)
    np.testing.assert_allclose(up.values, 3.25, atol=1e-12)


def test_bilinear_reproduces_ramp():
    src = np.add.outer(2.0 * np.arange(4), -0.5 * np.arange(4))[None]
    up = upsample(_fmap(src), 12, "bilinear").values[0]
    # destination centre i maps to source coordinate (i + 0.5)/3 - 0.5
    s = (np.arange(12) + 0.5) / 3 - 0.5
    np.testing.assert_allclose(up, np.add.outer(2.0 * s, -0.5 * s), atol=1e-12)


def test_nearest_block_replication():
    src = np.arange(4.0).reshape(1, 2, 2)
    up = upsample(_fmap(src), 4, "nearest").values[0]
    np.testing.assert_array_equal(up, np.kron(src[0], np.ones((2, 2))))


def test_upsample_errors():
    with pytest.raises(ValueError):
        upsample(_fmap(np.zeros((1, 3, 3))), 10)
    with pytest.raises(ValueError):
        interp_matrix(4, 8, "cubic")


@pytest.mark.parametrize("mode", ["bilinear", "nearest"])
def test_upsample_adjoint_dot_product(rng, mode):
    x = rng.normal(size=(3, 6, 6))
    y = rng.normal(size=(3, 24, 24))
    lhs = np.sum(upsample(_fmap(x), 24, mode).values * y)
    rhs = np.sum(x * upsample_adjoint(y, (6, 6), mode))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_fuse_sum_and_concat(rng):
    a, b = _fmap(rng.normal(size=(2, 4, 4))), _fmap(rng.normal(size=(2, 4, 4)))
    np.testing.assert_allclose(fuse([a, b]).values, a.values + b.values)
    np.testing.assert_array_equal(fuse([a, b]).values, fuse([b, a]).values)
    cat = fuse([a, b], "concat")
    assert cat.values.shape == (4, 4, 4)
    np.testing.assert_array_equal(cat.values[2:], b.values)
    assert fuse([a]).meta["fusion"] == "linear stand-in"


def test_fuse_errors(rng):
    a = _fmap(rng.normal(size=(2, 4, 4)))
    with pytest.raises(ValueError):
        fuse([a, _fmap(rng.normal(size=(3, 4, 4)))], "sum")
    with pytest.raises(ValueError):
        fuse([a, _fmap(rng.normal(size=(2, 8, 8)))])
    with pytest.raises(ValueError):
        fuse([a], "max")
    with pytest.raises(ValueError):
        fuse([])


def test_fuse_adjoint_concat(rng):
    g = rng.normal(size=(5, 4, 4))
    parts = fuse_adjoint(g, [2, 3], "concat")
    assert [p.shape[0] for p in parts] == [2, 3]
    np.testing.assert_array_equal(np.concatenate(parts), g)


def test_multiscale_sum_close_to_single_scale_sum(gaussians):
    # smooth inputs: each scale integrates the same field, so totals agree
    grids = scale_grids(BevGrid.square(50.0, 200), [50, 100, 200])
    maps, _ = render_multiscale(gaussians, grids, 3.0, eps=1.0, k_mode="scale")
    totals = [m.values.sum() * m.meta["resolution"] ** -2 for m in maps]
    np.testing.assert_allclose(totals, totals[-1], rtol=0.05)
