import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevsplat.camera import (
    CameraModel,
    build_frustum,
    camera_ring,
    look_camera,
    make_bins,
    pixel_centers,
    project,
    unproject,
)

from conftest import random_camera


def test_default_bins():
    b = make_bins(1, 61, 64)
    assert b.values[0] == 1.0
    assert b.values[1] == 1.9375
    assert b.values[63] == 60.0625
    assert np.all(np.diff(b.values) > 0)


@pytest.mark.parametrize("B, step", [(32, 1.875), (128, 0.46875)])
def test_bin_steps(B, step):
    b = make_bins(1, 61, B)
    assert b.step == step
    np.testing.assert_allclose(np.diff(b.values), step)
    assert b.values[-1] == pytest.approx(61 - step)


@pytest.mark.parametrize("args", [(0, 10, 2), (5, 5, 4), (1, 10, 1), (1, 10, 2.5)])
def test_bins_reject(args):
    with pytest.raises(ValueError):
        make_bins(*args)


def test_identity_unproject():
    cam = CameraModel(np.eye(3), np.eye(4), (4, 4))
    np.testing.assert_allclose(unproject(cam, 2, 0, 3), [6, 0, 3])


def test_principal_point_on_axis(camera):
    K = camera.intrinsics
    # principal point only lies on the optical axis without skew
    cam = CameraModel(np.array([[K[0, 0], 0, K[0, 2]], [0, K[1, 1], K[1, 2]], [0, 0, 1]]), camera.extrinsics, camera.image_size)
    for d in (0.5, 3.0, 40.0):
        p = unproject(cam, K[0, 2], K[1, 2], d)
        axis = cam.cam_to_ego[:3, 2]
        np.testing.assert_allclose(p, cam.center + d * axis, atol=1e-9)


def test_round_trip_1000(rng, camera):
    u = rng.uniform(0, 96, 1000)
    v = rng.uniform(0, 64, 1000)
    d = rng.uniform(0.5, 80, 1000)
    uvd = project(camera, unproject(camera, u, v, d))
    assert np.abs(uvd[:, 0] - u).max() < 1e-4
    assert np.abs(uvd[:, 1] - v).max() < 1e-4
    assert np.abs(uvd[:, 2] - d).max() < 1e-6


def test_rigid_invariance(rng, camera):
    T = np.eye(4)
    T[:3, :3] = random_camera(rng).extrinsics[:3, :3]
    T[:3, 3] = rng.normal(size=3) * 5
    u, v, d = rng.uniform(0, 90, 50), rng.uniform(0, 60, 50), rng.uniform(1, 50, 50)
    p = unproject(camera, u, v, d)
    moved = p @ T[:3, :3].T + T[:3, 3]
    np.testing.assert_allclose(unproject(camera.transformed(T), u, v, d), moved, atol=1e-5)


def test_nonpositive_depth_rejected(camera):
    with pytest.raises(ValueError):
        unproject(camera, 1.0, 1.0, 0.0)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(np.array([[1, 0, 0], [1, 1, 0], [0, 0, 1.0]]), np.eye(4), (2, 2))
    with pytest.raises(ValueError):
        CameraModel(np.diag([1.0, 1.0, 2.0]), np.eye(4), (2, 2))
    E = np.eye(4)
    E[0, 0] = 2
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), E, (2, 2))
    E = np.eye(4)
    E[3, 0] = 1
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), E, (2, 2))


def test_frustum_shape_default_setting():
    cam = look_camera(0.0, 1.5, (224, 480), 70)
    fr = build_frustum(cam, make_bins(1, 61, 64), 8)
    assert fr.points.shape == (28, 60, 64, 3)
    assert fr.shape == (28, 60, 64)


def test_stride_checks():
    with pytest.raises(ValueError):
        pixel_centers((224, 480), 7)
    uu, vv = pixel_centers((16, 32), 8)
    np.testing.assert_array_equal(uu[0], [4, 12, 20, 28])
    np.testing.assert_array_equal(vv[:, 0], [4, 12])


def _max_cross(points):
    seg = np.diff(points, axis=-2)
    a = seg[..., :-1, :] / np.linalg.norm(seg[..., :-1, :], axis=-1, keepdims=True)
    b = seg[..., 1:, :] / np.linalg.norm(seg[..., 1:, :], axis=-1, keepdims=True)
    return np.linalg.norm(np.cross(a, b), axis=-1).max()


def test_single_pixel_frustum_is_one_ray(camera):
    cam = CameraModel(camera.intrinsics, camera.extrinsics, (16, 16))
    fr = build_frustum(cam, make_bins(1, 20, 8), 16)
    assert fr.points.shape == (1, 1, 8, 3)
    assert _max_cross(fr.points) <= 1e-5


def test_frustum_collinear_every_pixel(camera):
    fr = build_frustum(camera, make_bins(1, 61, 64), 8)
    assert _max_cross(fr.points) <= 1e-5


@settings(max_examples=25, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(0.5, 3.0), st.floats(40, 110))
def test_look_camera_geometry(yaw, height, fov):
    cam = look_camera(yaw, height, (32, 64), fov)
    np.testing.assert_allclose(cam.center, [0, 0, height], atol=1e-12)
    # image centre looks along the heading, level
    p = unproject(cam, 32.0, 16.0, 10.0)
    np.testing.assert_allclose(p, [10 * np.cos(yaw), 10 * np.sin(yaw), height], atol=1e-9)


def test_ring_covers_full_circle():
    ring = camera_ring(6, hfov_deg=70)
    yaws = sorted(np.arctan2(c.cam_to_ego[1, 2], c.cam_to_ego[0, 2]) % (2 * np.pi) for c in ring)
    gaps = np.diff(yaws + [yaws[0] + 2 * np.pi])
    np.testing.assert_allclose(gaps, np.pi / 3)
    assert np.deg2rad(70) > gaps.max()
