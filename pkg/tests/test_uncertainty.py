import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bevsplat.camera import CameraModel, Frustum, build_frustum, make_bins
from bevsplat.gradients import first_central_moment
from bevsplat.uncertainty import (
    DepthDistribution,
    PixelGaussianSet,
    assemble_gaussians,
    depth_moments,
    filter_opacity,
    lift_camera,
    logistic,
    moments_3d,
    softmax_depth,
)


def _dist(p):
    p = np.asarray(p, dtype=np.float64)
    return DepthDistribution(p, np.log(np.maximum(p, 1e-300)))


def _axis_frustum(depths):
    pts = np.zeros((1, 1, len(depths), 3))
    pts[0, 0, :, 2] = depths
    return Frustum(pts)


def test_uniform_softmax():
    d = softmax_depth(np.zeros((4, 1, 1)))
    np.testing.assert_allclose(d.probs[:, 0, 0], 0.25)


def test_peaked_softmax_matches_double_oracle():
    d = softmax_depth(np.array([10.0, 0, 0, 0]).reshape(4, 1, 1))
    e = np.exp([10.0, 0, 0, 0])
    np.testing.assert_allclose(d.probs[:, 0, 0], e / e.sum(), rtol=1e-12)
    assert d.probs[0, 0, 0] == pytest.approx(0.99986, abs=1e-5)
    assert d.probs[1, 0, 0] == pytest.approx(4.5e-5, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(np.float64, (5, 2, 3), elements=st.floats(-30, 30)),
    st.floats(-500, 500),
)
def test_softmax_simplex_and_shift_invariance(z, c):
    p = softmax_depth(z).probs
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)
    np.testing.assert_allclose(softmax_depth(z + c).probs, p, atol=1e-7)


def test_softmax_large_logits_stable():
    p = softmax_depth(np.array([1000.0, 999.0]).reshape(2, 1, 1)).probs
    assert np.all(np.isfinite(p))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_nonfinite(bad):
    z = np.zeros((3, 1, 1))
    z[1] = bad
    with pytest.raises(ValueError):
        softmax_depth(z)


def test_two_point_depth_moments():
    bins = make_bins(2.0, 6.0, 2)  # {2, 4}
    m = depth_moments(_dist(np.array([0.5, 0.5]).reshape(2, 1, 1)), bins, 0.5)
    assert m.mu[0, 0] == pytest.approx(3.0)
    assert m.sigma[0, 0] == pytest.approx(1.0)
    assert (m.range_lo[0, 0], m.range_hi[0, 0]) == pytest.approx((2.5, 3.5))


def test_delta_depth_moments():
    bins = make_bins(1.0, 61.0, 64)
    i = int(np.argmin(np.abs(bins.values - 10.0)))
    p = np.zeros((64, 1, 1))
    p[i] = 1
    m = depth_moments(_dist(p), bins, 0.5)
    assert m.mu[0, 0] == bins.values[i]
    assert m.sigma[0, 0] == 0
    assert m.range_lo[0, 0] == m.range_hi[0, 0] == bins.values[i]


def test_depth_moments_vs_compensated_sum(rng):
    bins = make_bins(1, 61, 64)
    k = 0.7
    dist = softmax_depth(rng.normal(0, 2, (64, 3, 4)))
    m = depth_moments(dist, bins, k)
    d_lo = bins.d_min - k * (bins.d_max - bins.d_min)
    for i in range(3):
        for j in range(4):
            p = dist.probs[:, i, j]
            mu = math.fsum(p * bins.values)
            var = math.fsum(p * (bins.values - mu) ** 2)
            assert m.mu[i, j] == pytest.approx(mu, rel=1e-5)
            assert m.sigma[i, j] == pytest.approx(math.sqrt(var), rel=1e-5)
            assert d_lo <= m.range_lo[i, j] <= m.range_hi[i, j]
            assert m.range_lo[i, j] == pytest.approx(m.mu[i, j] - k * m.sigma[i, j])


def test_axis_pixel_moments():
    mu, cov = moments_3d(_dist(np.array([0.5, 0.5]).reshape(2, 1, 1)), _axis_frustum([2.0, 4.0]))
    np.testing.assert_allclose(mu[0], [0, 0, 3])
    np.testing.assert_allclose(cov[0], np.diag([0, 0, 1.0]))


def test_delta_moments_hit_frustum_point(camera):
    fr = build_frustum(camera, make_bins(1, 30, 8), 32)
    h, w, B = fr.shape
    p = np.zeros((B, h, w))
    p[3] = 1
    mu, cov = moments_3d(_dist(p), fr)
    np.testing.assert_allclose(mu, fr.points[:, :, 3].reshape(-1, 3), atol=1e-12)
    np.testing.assert_allclose(cov, 0, atol=1e-12)


def test_moments_shape_mismatch(camera):
    fr = build_frustum(camera, make_bins(1, 30, 8), 32)
    with pytest.raises(ValueError):
        moments_3d(_dist(np.full((7, 2, 3), 1 / 7)), fr)


def test_monte_carlo_oracle(rng, camera):
    fr = build_frustum(camera, make_bins(1, 61, 64), 8)
    h, w, B = fr.shape
    dist = softmax_depth(rng.normal(0, 1.5, (B, h, w)))
    mu, cov = moments_3d(dist, fr)
    n = 200_000
    for _ in range(5):
        i, j = rng.integers(h), rng.integers(w)
        p = dist.probs[:, i, j]
        pts = fr.points[i, j]
        x = pts[rng.choice(B, size=n, p=p / p.sum())]
        pix = i * w + j
        m_hat = x.mean(axis=0)
        se_mean = x.std(axis=0) / math.sqrt(n)
        assert np.all(np.abs(m_hat - mu[pix]) <= 4 * se_mean + 1e-12)
        dev = x - mu[pix]
        outer = dev[:, :, None] * dev[:, None, :]
        c_hat = outer.mean(axis=0)
        se_cov = outer.std(axis=0) / math.sqrt(n)
        assert np.all(np.abs(c_hat - cov[pix]) <= 4 * se_cov + 1e-9)


def test_covariance_symmetric_psd_rank_one(rng, camera):
    fr = build_frustum(camera, make_bins(1, 61, 64), 8)
    h, w, B = fr.shape
    dist = softmax_depth(rng.normal(0, 2, (B, h, w)))
    mu, cov = moments_3d(dist, fr)
    np.testing.assert_allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-6)
    ev = np.linalg.eigvalsh(cov)
    assert ev.min() >= -1e-6
    assert np.all(ev[:, :2] <= 1e-6 * ev[:, 2:] + 1e-9)
    # trace = depth variance * |ray per metre of depth|^2
    bins = make_bins(1, 61, 64)
    pts = fr.points.reshape(h * w, B, 3)
    ray = (pts[:, 1] - pts[:, 0]) / bins.step
    var = depth_moments(dist, bins, 1.0).sigma.reshape(-1) ** 2
    np.testing.assert_allclose(np.trace(cov, axis1=1, axis2=2), var * (ray**2).sum(1), rtol=1e-6)
    # mean on the ray segment between first and last point
    a, b = pts[:, 0], pts[:, -1]
    t = ((mu - a) * (b - a)).sum(1) / ((b - a) ** 2).sum(1)
    assert np.all((t >= -1e-9) & (t <= 1 + 1e-9))
    assert np.abs(a + t[:, None] * (b - a) - mu).max() < 1e-5
    assert np.abs(first_central_moment(dist, fr)).max() < 1e-6


def test_assemble():
    mu = np.zeros((6, 3))
    cov = np.zeros((6, 3, 3))
    F = np.arange(2 * 6, dtype=np.float32).reshape(2, 2, 3)
    gs = assemble_gaussians(mu, cov, np.zeros((2, 3)), F, camera_index=4)
    np.testing.assert_allclose(gs.opacity, 0.5)
    assert gs.opacity.dtype == np.float32
    np.testing.assert_array_equal(gs.features[:, 0], F[0].ravel())
    np.testing.assert_array_equal(gs.pixel[4], [1, 1])
    assert np.all(gs.camera_index == 4)
    with pytest.raises(ValueError):
        assemble_gaussians(mu, cov, np.zeros((2, 3)), np.zeros((0, 2, 3)))
    with pytest.raises(ValueError):
        assemble_gaussians(mu, cov, np.zeros((3, 2)), F)


def test_default_stride_gives_1680_per_camera():
    from bevsplat.camera import look_camera

    cam = look_camera(0.0, 1.5, (224, 480), 70)
    fr = build_frustum(cam, make_bins(1, 61, 64), 8)
    gs = lift_camera(np.zeros((64, 28, 60)), np.zeros((28, 60)), np.ones((3, 28, 60)), fr)
    assert len(gs) == 1680


def test_logistic_extremes():
    x = np.array([-800.0, -4.0, 0.0, 4.0, 800.0])
    y = logistic(x)
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[-1] == 1.0
    np.testing.assert_allclose(y[1:4], 1 / (1 + np.exp(-x[1:4])))


def _set(alpha):
    n = len(alpha)
    return PixelGaussianSet(np.zeros((n, 3)), np.zeros((n, 3, 3)), np.asarray(alpha), np.arange(n, dtype=float)[:, None])


def test_filter_opacity():
    out = filter_opacity(_set([0.5, 0.005, 0.02]), 0.01)
    np.testing.assert_array_equal(out.features[:, 0], [0, 2])
    assert out.retained_fraction == pytest.approx(2 / 3)
    same = filter_opacity(_set([0.5, 0.0, 0.02]), 0.0)
    assert len(same) == 3 and same.retained_fraction == 1.0
    with pytest.raises(ValueError):
        filter_opacity(_set([0.5]), 1.01)
    with pytest.raises(ValueError):
        filter_opacity(_set([0.5]), -0.1)
