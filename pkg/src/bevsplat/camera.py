"""Depth bins, pinhole cameras and frustum unprojection.

Conventions
-----------
* Extrinsics ``E`` map **ego-frame** points to **camera-frame** points
  (``p_cam = E @ p_ego``); unprojection applies ``E^-1``.
* Camera frame is x right, y down, z forward.
* Depth ``d`` is planar depth (the camera-frame z coordinate), not range along
  the ray.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DepthBinning:
    d_min: float
    d_max: float
    bins: int
    values: np.ndarray

    @property
    def step(self) -> float:
        return (self.d_max - self.d_min) / self.bins


def make_bins(d_min: float, d_max: float, bins: int) -> DepthBinning:
    """Uniform depth hypotheses ``d_i = d_min + i * (d_max - d_min) / bins``.

    The last bin sits one step short of ``d_max``.
    """
    if not d_min > 0:
        raise ValueError(f"d_min must be > 0, got {d_min}")
    if not d_max > d_min:
        raise ValueError(f"d_max must exceed d_min, got [{d_min}, {d_max}]")
    if int(bins) != bins or bins < 2:
        raise ValueError(f"bins must be an integer >= 2, got {bins}")
    bins = int(bins)
    values = d_min + np.arange(bins, dtype=np.float64) * ((d_max - d_min) / bins)
    values.setflags(write=False)
    return DepthBinning(float(d_min), float(d_max), bins, values)


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray  # 3x3
    extrinsics: np.ndarray  # 4x4, ego -> camera
    image_size: tuple[int, int]  # (H, W)

    def __post_init__(self) -> None:
        K = np.asarray(self.intrinsics, dtype=np.float64)
        E = np.asarray(self.extrinsics, dtype=np.float64)
        if K.shape != (3, 3) or E.shape != (4, 4):
            raise ValueError("intrinsics must be 3x3 and extrinsics 4x4")
        if K[2, 2] != 1.0 or K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError("intrinsics must be upper triangular with K[2,2] == 1")
        if abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("intrinsics must be invertible")
        R = E[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("extrinsics rotation block is not orthonormal")
        if not np.array_equal(E[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("extrinsics last row must be [0, 0, 0, 1]")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", E)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @property
    def cam_to_ego(self) -> np.ndarray:
        # rigid inverse; avoids a general 4x4 inversion
        R = self.extrinsics[:3, :3]
        t = self.extrinsics[:3, 3]
        out = np.eye(4)
        out[:3, :3] = R.T
        out[:3, 3] = -R.T @ t
        return out

    @property
    def center(self) -> np.ndarray:
        """Camera centre in the ego frame."""
        return self.cam_to_ego[:3, 3]

    def rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Ego-frame displacement per metre of planar depth for pixels (u, v)."""
        pix = np.stack([u, v, np.ones_like(u)], axis=-1).astype(np.float64)
        cam = pix @ np.linalg.inv(self.intrinsics).T
        return cam @ self.cam_to_ego[:3, :3].T

    def transformed(self, T: np.ndarray) -> "CameraModel":
        """Same camera after moving the ego frame by the rigid transform ``T``."""
        return CameraModel(self.intrinsics, self.extrinsics @ np.linalg.inv(T), self.image_size)


def unproject(cam: CameraModel, u, v, d) -> np.ndarray:
    """Lift pixel ``(u, v)`` at planar depth ``d`` into the ego frame.

    Computes ``E^-1 (d * K^-1 [u, v, 1]^T)``. Inputs broadcast; output has a
    trailing axis of 3.
    """
    u, v, d = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(d, float))
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    cam_pts = d[..., None] * (pix @ np.linalg.inv(cam.intrinsics).T)
    M = cam.cam_to_ego
    return cam_pts @ M[:3, :3].T + M[:3, 3]


def project(cam: CameraModel, pts: np.ndarray) -> np.ndarray:
    """Ego-frame points to ``(u, v, d)`` with ``d`` the planar depth."""
    pts = np.asarray(pts, dtype=np.float64)
    E = cam.extrinsics
    cam_pts = pts @ E[:3, :3].T + E[:3, 3]
    d = cam_pts[..., 2]
    uvw = cam_pts @ cam.intrinsics.T
    return np.stack([uvw[..., 0] / d, uvw[..., 1] / d, d], axis=-1)


@dataclass(frozen=True)
class Frustum:
    points: np.ndarray  # (H', W', B, 3), ego metres
    camera_index: int = 0

    @property
    def shape(self) -> tuple[int, int, int]:
        h, w, b, _ = self.points.shape
        return h, w, b


def pixel_centers(image_size: tuple[int, int], stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Strided sampling grid at cell centres: ``u = (j + 0.5) * stride``."""
    H, W = image_size
    if stride < 1 or H % stride or W % stride:
        raise ValueError(f"stride {stride} does not divide image size {H}x{W}")
    v = (np.arange(H // stride) + 0.5) * stride
    u = (np.arange(W // stride) + 0.5) * stride
    uu, vv = np.meshgrid(u, v)
    return uu, vv


def build_frustum(cam: CameraModel, bins: DepthBinning, stride: int, camera_index: int = 0) -> Frustum:
    uu, vv = pixel_centers(cam.image_size, stride)
    pts = unproject(cam, uu[..., None], vv[..., None], bins.values[None, None, :])
    return Frustum(pts, camera_index)


def look_camera(
    yaw: float,
    height: float,
    image_size: tuple[int, int],
    hfov_deg: float,
    position: tuple[float, float] = (0.0, 0.0),
) -> CameraModel:
    """A level camera at ``(x, y, height)`` looking along ego heading ``yaw``.

    Ego frame: x forward, y left, z up.
    """
    H, W = image_size
    f = (W / 2.0) / np.tan(np.deg2rad(hfov_deg) / 2.0)
    K = np.array([[f, 0.0, W / 2.0], [0.0, f, H / 2.0], [0.0, 0.0, 1.0]])
    c, s = np.cos(yaw), np.sin(yaw)
    forward = np.array([c, s, 0.0])
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    R = np.stack([right, down, forward])  # rows: camera axes expressed in ego frame
    center = np.array([position[0], position[1], height])
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ center
    return CameraModel(K, E, (H, W))


def camera_ring(
    n: int = 6,
    height: float = 1.5,
    image_size: tuple[int, int] = (224, 480),
    hfov_deg: float = 70.0,
    yaw_offset: float = 0.0,
) -> list[CameraModel]:
    """``n`` cameras spaced evenly in yaw around the ego origin."""
    return [
        look_camera(yaw_offset + 2.0 * np.pi * i / n, height, image_size, hfov_deg)
        for i in range(n)
    ]
