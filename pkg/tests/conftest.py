import numpy as np
import pytest

from bevsplat.camera import CameraModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng, image_size=(64, 96)) -> CameraModel:
    H, W = image_size
    f = rng.uniform(50.0, 300.0)
    K = np.array([[f, rng.uniform(-2, 2), W / 2 + rng.uniform(-5, 5)], [0.0, f * rng.uniform(0.9, 1.1), H / 2], [0, 0, 1]])
    E = np.eye(4)
    E[:3, :3] = random_rotation(rng)
    E[:3, 3] = rng.normal(size=3)
    return CameraModel(K, E, image_size)


@pytest.fixture
def camera(rng):
    return random_camera(rng)
