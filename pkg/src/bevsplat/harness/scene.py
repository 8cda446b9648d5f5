"""Synthetic multi-camera scenes with box obstacles.

Each feature pixel casts a ray from its camera. Pixels whose ray hits a box
get high opacity and the vehicle class feature; everything else is background
placed at the far end of the depth range with low opacity.

Two depth targets are supported:

``surface``
    the distribution is centred on the first box-surface hit (planar depth);
    with zero noise it is one-hot at the nearest bin.
``extent``
    the distribution is centred on the middle of the ray's chord through the
    box, with a spread such that ``[mu - k*sigma, mu + k*sigma]`` spans the
    chord for the scene's ``extent_k``. This is the idealised output of a
    depth head whose variance encodes object extent, and it is what lets the
    splatted Gaussians fill box footprints rather than only their visible
    faces.

In both cases ``depth_noise_sigma`` widens the distribution in quadrature.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..camera import CameraModel, DepthBinning, Frustum, build_frustum, camera_ring, make_bins, pixel_centers
from ..rasterizer import BevGrid
from ..tensor_io import RunConfig, read_tensor, write_tensor

log = logging.getLogger(__name__)

OPACITY_HIT = 4.0
OPACITY_MISS = -4.0
LOGIT_FLOOR = -50.0
BACKGROUND, VEHICLE = 0, 1


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # length (along heading), width, height
    yaw: float = 0.0

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw}

    def rotated(self, angle: float) -> "Box":
        c, s = np.cos(angle), np.sin(angle)
        x, y, z = self.center
        return Box((c * x - s * y, s * x + c * y, z), self.size, self.yaw + angle)


def standard_boxes() -> list[Box]:
    """The five-vehicle reference scene."""
    return [
        Box((10.0, 0.0, 0.75), (4.0, 2.0, 1.5), 0.0),
        Box((-12.0, 6.0, 0.8), (4.5, 2.0, 1.6), 0.5),
        Box((4.0, -14.0, 0.8), (4.2, 1.9, 1.6), 1.2),
        Box((17.0, 13.0, 0.85), (5.0, 2.2, 1.7), -0.4),
        Box((-7.0, -19.0, 0.9), (6.0, 2.5, 1.8), 0.2),
    ]


@dataclass
class SceneSpec:
    boxes: list[Box] = field(default_factory=standard_boxes)
    cameras: list[CameraModel] | None = None
    depth_noise_sigma: float = 0.0
    feature_mode: str = "onehot_class"
    depth_target: str = "extent"
    extent_k: float = 0.5
    channels: int = 2
    seed: int = 0

    def resolved_cameras(self, cfg: RunConfig) -> list[CameraModel]:
        if self.cameras is not None:
            return self.cameras
        return camera_ring(6, image_size=cfg.image_size)

    def to_dict(self) -> dict:
        return {
            "boxes": [b.to_dict() for b in self.boxes],
            "depth_noise_sigma": self.depth_noise_sigma,
            "feature_mode": self.feature_mode,
            "depth_target": self.depth_target,
            "extent_k": self.extent_k,
            "channels": self.channels,
            "seed": self.seed,
        }


@dataclass
class Scene:
    spec: SceneSpec
    config: RunConfig
    cameras: list[CameraModel]
    frustums: list[Frustum]
    depth_logits: list[np.ndarray]  # (B, h, w) each
    opacity_logits: list[np.ndarray]  # (h, w)
    features: list[np.ndarray]  # (C, h, w)
    gt_depth: list[np.ndarray]  # (h, w), planar depth of first hit, nan for background
    gt_mask: np.ndarray  # (R, R) uint8
    hit_box: list[np.ndarray] = field(default_factory=list)  # (h, w) box index or -1


def ray_box_intervals(origin: np.ndarray, dirs: np.ndarray, box: Box) -> tuple[np.ndarray, np.ndarray]:
    """Slab test. ``dirs`` is ``(..., 3)``; returns ``(t_in, t_out)`` with
    ``t_in > t_out`` (or ``t_out <= 0``) meaning no hit."""
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    R = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # ego -> box frame
    o = R @ (origin - np.asarray(box.center))
    d = dirs @ R.T
    half = 0.5 * np.asarray(box.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    # parallel rays: inside the slab -> unbounded, outside -> empty
    par = d == 0
    inside = np.abs(o) <= half
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    return lo.max(axis=-1), hi.min(axis=-1)


def discretized_gaussian_logits(mu: np.ndarray, sigma: np.ndarray, bins: DepthBinning) -> np.ndarray:
    """Log-probabilities over ``bins`` of a Gaussian sampled at the bin depths.

    ``sigma == 0`` gives a one-hot at the nearest bin. Output is ``(B, ...)``.
    """
    d = bins.values.reshape((-1,) + (1,) * mu.ndim)
    nearest = np.clip(np.rint((mu - bins.d_min) / bins.step), 0, bins.bins - 1).astype(int)
    onehot = np.where(np.arange(bins.bins).reshape(d.shape) == nearest[None], 0.0, LOGIT_FLOOR)
    safe = np.where(sigma > 0, sigma, 1.0)
    z = -0.5 * ((d - mu[None]) / safe[None]) ** 2
    z = z - z.max(axis=0, keepdims=True)
    z = np.maximum(z, LOGIT_FLOOR)
    return np.where(sigma[None] > 0, z, onehot)


def footprint_mask(boxes: list[Box], grid: BevGrid) -> np.ndarray:
    """Cells whose centre lies inside any box footprint."""
    X, Y = grid.cell_centers_metric()
    mask = np.zeros(grid.shape, dtype=bool)
    for b in boxes:
        c, s = np.cos(b.yaw), np.sin(b.yaw)
        dx, dy = X - b.center[0], Y - b.center[1]
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        mask |= (np.abs(lx) <= 0.5 * b.size[0]) & (np.abs(ly) <= 0.5 * b.size[1])
    return mask.astype(np.uint8)


def gen_scene(spec: SceneSpec, cfg: RunConfig | None = None) -> Scene:
    cfg = cfg or RunConfig()
    if spec.depth_target not in ("surface", "extent"):
        raise ValueError(f"unknown depth target {spec.depth_target!r}")
    if spec.feature_mode not in ("onehot_class", "random"):
        raise ValueError(f"unknown feature mode {spec.feature_mode!r}")
    if spec.channels < 2:
        raise ValueError("scenes need at least a background and a vehicle channel")
    bins = make_bins(cfg.depth.d_min, cfg.depth.d_max, cfg.depth.bins)
    grid = BevGrid.from_config(cfg.bev)
    for b in spec.boxes:
        if not (grid.x_min <= b.center[0] <= grid.x_max and grid.y_min <= b.center[1] <= grid.y_max):
            raise ValueError(f"box at {b.center} lies outside the BEV extent")
    cams = spec.resolved_cameras(cfg)
    rng = np.random.default_rng(spec.seed)
    seen = np.zeros(len(spec.boxes), dtype=bool)

    frustums, depth_logits, opacity_logits, features, gt_depths, hits = [], [], [], [], [], []
    for ci, cam in enumerate(cams):
        frustums.append(build_frustum(cam, bins, cfg.feature_stride, camera_index=ci))
        uu, vv = pixel_centers(cam.image_size, cfg.feature_stride)
        dirs = cam.rays(uu, vv)  # ego displacement per metre of planar depth
        origin = cam.center
        h, w = uu.shape
        t_in = np.full((h, w), np.inf)
        t_out = np.full((h, w), np.inf)
        hit = np.full((h, w), -1)
        for bi, box in enumerate(spec.boxes):
            lo, hi = ray_box_intervals(origin, dirs, box)
            ok = (hi >= lo) & (lo > 0) & (lo < t_in)
            t_in = np.where(ok, lo, t_in)
            t_out = np.where(ok, hi, t_out)
            hit = np.where(ok, bi, hit)
        is_hit = hit >= 0
        seen[np.unique(hit[is_hit])] = True

        if spec.depth_target == "surface":
            mu = np.where(is_hit, t_in, cfg.depth.d_max)
            spread = np.zeros((h, w))
        else:
            mu = np.where(is_hit, 0.5 * (np.where(is_hit, t_in, 0.0) + np.where(is_hit, t_out, 0.0)), cfg.depth.d_max)
            spread = np.where(is_hit, (np.where(is_hit, t_out, 0.0) - np.where(is_hit, t_in, 0.0)) / (2.0 * spec.extent_k), 0.0)
        sigma = np.sqrt(spread**2 + spec.depth_noise_sigma**2)
        depth_logits.append(discretized_gaussian_logits(mu, sigma, bins))
        opacity_logits.append(np.where(is_hit, OPACITY_HIT, OPACITY_MISS))
        F = np.zeros((spec.channels, h, w))
        if spec.feature_mode == "random":
            F[:] = rng.normal(size=F.shape)
        F[BACKGROUND] = np.where(is_hit, 0.0, 1.0)
        F[VEHICLE] = np.where(is_hit, 1.0, 0.0)
        features.append(F)
        gt_depths.append(np.where(is_hit, t_in, np.nan))
        hits.append(hit)

    for bi in np.flatnonzero(~seen):
        log.warning("box %d at %s is not visible from any camera", bi, spec.boxes[bi].center)
    return Scene(
        spec=spec,
        config=cfg,
        cameras=cams,
        frustums=frustums,
        depth_logits=depth_logits,
        opacity_logits=opacity_logits,
        features=features,
        gt_depth=gt_depths,
        gt_mask=footprint_mask(spec.boxes, grid),
        hit_box=hits,
    )


def rotate_scene_spec(spec: SceneSpec, cfg: RunConfig, angle: float) -> SceneSpec:
    """The same scene with the whole world (boxes and rig) yawed by ``angle``."""
    c, s = np.cos(angle), np.sin(angle)
    T = np.eye(4)
    T[:2, :2] = [[c, -s], [s, c]]
    cams = [cam.transformed(T) for cam in spec.resolved_cameras(cfg)]
    return SceneSpec(
        boxes=[b.rotated(angle) for b in spec.boxes],
        cameras=cams,
        depth_noise_sigma=spec.depth_noise_sigma,
        feature_mode=spec.feature_mode,
        depth_target=spec.depth_target,
        extent_k=spec.extent_k,
        channels=spec.channels,
        seed=spec.seed,
    )


# ---------------------------------------------------------------------------
# on-disk layout


def save_scene(scene: Scene, out_dir: str | Path) -> None:
    """``scene.json`` plus ``cam{i}_{depth_logits,opacity_logits,features}.bevt`` and ``gt_mask.bevt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = np.float32 if scene.config.dtype == "f32" else np.float64
    for i in range(len(scene.cameras)):
        write_tensor(scene.depth_logits[i].astype(dtype), out / f"cam{i}_depth_logits.bevt")
        write_tensor(scene.opacity_logits[i].astype(dtype), out / f"cam{i}_opacity_logits.bevt")
        write_tensor(scene.features[i].astype(dtype), out / f"cam{i}_features.bevt")
    write_tensor(scene.gt_mask.astype(np.float32), out / "gt_mask.bevt")
    meta = {
        "spec": scene.spec.to_dict(),
        "config": scene.config.to_dict(),
        "cameras": [
            {
                "intrinsics": cam.intrinsics.tolist(),
                "extrinsics": cam.extrinsics.tolist(),
                "image_size": list(cam.image_size),
            }
            for cam in scene.cameras
        ],
    }
    (out / "scene.json").write_text(json.dumps(meta, indent=2))


@dataclass
class LoadedScene:
    cameras: list[CameraModel]
    depth_logits: list[np.ndarray]
    opacity_logits: list[np.ndarray]
    features: list[np.ndarray]
    gt_mask: np.ndarray
    meta: dict


def load_scene(scene_dir: str | Path) -> LoadedScene:
    d = Path(scene_dir)
    meta = json.loads((d / "scene.json").read_text())
    cams = [
        CameraModel(np.array(c["intrinsics"]), np.array(c["extrinsics"]), tuple(c["image_size"]))
        for c in meta["cameras"]
    ]
    n = len(cams)
    return LoadedScene(
        cameras=cams,
        depth_logits=[read_tensor(d / f"cam{i}_depth_logits.bevt") for i in range(n)],
        opacity_logits=[read_tensor(d / f"cam{i}_opacity_logits.bevt") for i in range(n)],
        features=[read_tensor(d / f"cam{i}_features.bevt") for i in range(n)],
        gt_mask=read_tensor(d / "gt_mask.bevt"),
        meta=meta,
    )
