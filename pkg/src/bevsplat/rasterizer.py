"""Projection of 3D Gaussians onto the BEV plane and feature splatting.

BEV cell coordinates are continuous, with cell ``(row, col)`` centred at
``(row + 0.5, col + 0.5)``. Rows follow ego x and columns follow ego y, so the
x/y axes swap when mapping to the plane. All 2D quantities below (means,
covariances, conics) are ordered ``(col, row)``; with that ordering the
projection matrix is ``S = [[0, scale_col], [scale_row, 0]]`` and

    cov2d = S @ cov_xy @ S.T
          = [[cov_yy * scale_col**2,           cov_yx * scale_col * scale_row],
             [cov_xy * scale_row * scale_col,  cov_xx * scale_row**2       ]]

A Gaussian contributes ``F * alpha * exp(-m**2 / 2)`` to every cell whose
Mahalanobis distance ``m`` is at most the cutoff, and exactly zero beyond it.
Contributions add; there is no transmittance ordering in BEV.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from numba import njit

from .backend import get_kernels, thread_count

TILE = 16
DEFAULT_EPS = 1e-4
SCALE_MODE_CUTOFF = 3.0


@dataclass(frozen=True)
class BevGrid:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    n_rows: int
    n_cols: int

    def __post_init__(self) -> None:
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("BEV extent must satisfy x_max > x_min and y_max > y_min")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("BEV grid needs at least one row and column")

    @classmethod
    def square(cls, half_extent: float = 50.0, resolution: int = 200) -> "BevGrid":
        return cls(-half_extent, half_extent, -half_extent, half_extent, resolution, resolution)

    @classmethod
    def from_config(cls, bev, resolution: int | None = None) -> "BevGrid":
        n = bev.resolution if resolution is None else resolution
        return cls(bev.x_min, bev.x_max, bev.y_min, bev.y_max, n, n)

    @property
    def scale_row(self) -> float:
        return self.n_rows / (self.x_max - self.x_min)

    @property
    def scale_col(self) -> float:
        return self.n_cols / (self.y_max - self.y_min)

    @property
    def projection(self) -> np.ndarray:
        """Linear map from ego (x, y) to cell (col, row)."""
        return np.array([[0.0, self.scale_col], [self.scale_row, 0.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    def same_extent(self, other: "BevGrid") -> bool:
        return (self.x_min, self.x_max, self.y_min, self.y_max) == (
            other.x_min,
            other.x_max,
            other.y_min,
            other.y_max,
        )

    def cell_centers_metric(self) -> tuple[np.ndarray, np.ndarray]:
        """Ego (x, y) of every cell centre, each shaped ``(n_rows, n_cols)``."""
        x = self.x_min + (np.arange(self.n_rows) + 0.5) / self.scale_row
        y = self.y_min + (np.arange(self.n_cols) + 0.5) / self.scale_col
        return np.meshgrid(x, y, indexing="ij")

    def to_cells(self, xy: np.ndarray) -> np.ndarray:
        """Ego ``(..., 2)`` x/y to continuous ``(col, row)``."""
        xy = np.asarray(xy, dtype=np.float64)
        col = (xy[..., 1] - self.y_min) * self.scale_col
        row = (xy[..., 0] - self.x_min) * self.scale_row
        return np.stack([col, row], axis=-1)


@dataclass(frozen=True)
class BevGaussian2D:
    mu2d: np.ndarray  # (col, row)
    cov2d: np.ndarray  # regularised, (col, row) order
    inv_cov2d: np.ndarray
    opacity: float
    feature_index: int
    cull_radius: float
    cov2d_raw: np.ndarray = field(default=None)

    @property
    def row(self) -> float:
        return float(self.mu2d[1])

    @property
    def col(self) -> float:
        return float(self.mu2d[0])


def project_cov(cov_xy: np.ndarray, grid: BevGrid) -> np.ndarray:
    """Closed-form ``S cov_xy S^T`` for ``(..., 2, 2)`` x/y covariances."""
    cov_xy = np.asarray(cov_xy, dtype=np.float64)
    sr, sc = grid.scale_row, grid.scale_col
    out = np.empty(cov_xy.shape, dtype=np.float64)
    out[..., 0, 0] = cov_xy[..., 1, 1] * sc * sc
    out[..., 0, 1] = cov_xy[..., 1, 0] * sc * sr
    out[..., 1, 0] = cov_xy[..., 0, 1] * sr * sc
    out[..., 1, 1] = cov_xy[..., 0, 0] * sr * sr
    return out


def _sym2_inverse(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b, c = cov[..., 0, 0], 0.5 * (cov[..., 0, 1] + cov[..., 1, 0]), cov[..., 1, 1]
    det = a * c - b * b
    if np.any(det <= 0):
        raise ValueError("projected covariance is not positive definite; increase eps")
    conic = np.stack([c / det, -b / det, a / det], axis=-1)
    return conic, det


def _sym2_max_eig(cov: np.ndarray) -> np.ndarray:
    a, b, c = cov[..., 0, 0], 0.5 * (cov[..., 0, 1] + cov[..., 1, 0]), cov[..., 1, 1]
    mid = 0.5 * (a + c)
    return mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))


@dataclass
class ProjectedGaussians:
    """Struct-of-arrays batch of BEV Gaussians sharing one grid and cutoff."""

    grid: BevGrid
    mean: np.ndarray  # (N, 2) col,row
    cov_raw: np.ndarray  # (N, 2, 2) before regularisation / k scaling
    cov: np.ndarray  # (N, 2, 2) effective covariance used by the kernel
    conic: np.ndarray  # (N, 3) inverse of cov: (Q00, Q01, Q11)
    opacity: np.ndarray  # (N,)
    radius: np.ndarray  # (N,)
    cutoff: float
    k: float
    eps: float
    k_mode: str = "truncate"

    def __len__(self) -> int:
        return self.mean.shape[0]

    def __getitem__(self, i: int) -> BevGaussian2D:
        a, b, c = self.conic[i]
        return BevGaussian2D(
            mu2d=self.mean[i].copy(),
            cov2d=self.cov[i].copy(),
            inv_cov2d=np.array([[a, b], [b, c]]),
            opacity=float(self.opacity[i]),
            feature_index=i,
            cull_radius=float(self.radius[i]),
            cov2d_raw=self.cov_raw[i].copy(),
        )

    def __iter__(self) -> Iterable[BevGaussian2D]:
        return (self[i] for i in range(len(self)))

    @property
    def cutoff2(self) -> float:
        return self.cutoff * self.cutoff

    @property
    def cov_scale(self) -> float:
        """Factor applied to ``cov_raw`` before adding ``eps``."""
        return self.k * self.k if self.k_mode == "scale" else 1.0

    @classmethod
    def from_list(cls, gaussians: list[BevGaussian2D], grid: BevGrid, k: float, eps: float = DEFAULT_EPS):
        n = len(gaussians)
        mean = np.array([g.mu2d for g in gaussians], dtype=np.float64).reshape(n, 2)
        cov = np.array([g.cov2d for g in gaussians], dtype=np.float64).reshape(n, 2, 2)
        raw = np.array(
            [g.cov2d_raw if g.cov2d_raw is not None else g.cov2d for g in gaussians], dtype=np.float64
        ).reshape(n, 2, 2)
        conic = np.array(
            [[g.inv_cov2d[0, 0], g.inv_cov2d[0, 1], g.inv_cov2d[1, 1]] for g in gaussians], dtype=np.float64
        ).reshape(n, 3)
        return cls(
            grid=grid,
            mean=mean,
            cov_raw=raw,
            cov=cov,
            conic=conic,
            opacity=np.array([g.opacity for g in gaussians], dtype=np.float64),
            radius=np.array([g.cull_radius for g in gaussians], dtype=np.float64),
            cutoff=float(k),
            k=float(k),
            eps=eps,
        )


def project_gaussians(
    mu3d: np.ndarray,
    cov3d: np.ndarray,
    opacity: np.ndarray,
    grid: BevGrid,
    k: float,
    eps: float = DEFAULT_EPS,
    k_mode: str = "truncate",
) -> ProjectedGaussians:
    """Project a batch of 3D Gaussians onto ``grid``; the z axis is dropped.

    ``k_mode="truncate"`` keeps the covariance and cuts the kernel at
    Mahalanobis distance ``k``. ``k_mode="scale"`` multiplies the covariance by
    ``k**2`` and cuts at 3.
    """
    mu3d = np.asarray(mu3d, dtype=np.float64).reshape(-1, 3)
    cov3d = np.asarray(cov3d, dtype=np.float64).reshape(-1, 3, 3)
    if not (np.all(np.isfinite(mu3d)) and np.all(np.isfinite(cov3d))):
        raise ValueError("non-finite Gaussian mean or covariance")
    if k <= 0:
        raise ValueError("k must be positive")
    if k_mode not in ("truncate", "scale"):
        raise ValueError(f"unknown k_mode {k_mode!r}")
    mean = grid.to_cells(mu3d[:, :2])
    raw = project_cov(cov3d[:, :2, :2], grid)
    scale = k * k if k_mode == "scale" else 1.0
    cutoff = SCALE_MODE_CUTOFF if k_mode == "scale" else float(k)
    cov = scale * raw
    cov[:, 0, 0] += eps
    cov[:, 1, 1] += eps
    conic, _ = _sym2_inverse(cov) if len(cov) else (np.zeros((0, 3)), None)
    radius = cutoff * np.sqrt(_sym2_max_eig(cov)) + 0.5
    return ProjectedGaussians(
        grid=grid,
        mean=mean,
        cov_raw=raw,
        cov=cov,
        conic=conic,
        opacity=np.asarray(opacity, dtype=np.float64).reshape(-1).copy(),
        radius=radius,
        cutoff=cutoff,
        k=float(k),
        eps=float(eps),
        k_mode=k_mode,
    )


def project_to_bev(
    mu3d: np.ndarray,
    cov3d: np.ndarray,
    grid: BevGrid,
    k: float,
    eps: float = DEFAULT_EPS,
    opacity: float = 1.0,
    feature_index: int = 0,
) -> BevGaussian2D:
    """Single-Gaussian form of :func:`project_gaussians` (truncation mode)."""
    cov3d = np.asarray(cov3d, dtype=np.float64)
    if not np.allclose(cov3d, cov3d.T, atol=1e-9, rtol=1e-9):
        raise ValueError("cov3d must be symmetric")
    batch = project_gaussians(np.reshape(mu3d, (1, 3)), cov3d[None], [opacity], grid, k, eps)
    g = batch[0]
    return BevGaussian2D(g.mu2d, g.cov2d, g.inv_cov2d, g.opacity, feature_index, g.cull_radius, g.cov2d_raw)


@dataclass
class BevFeatureMap:
    values: np.ndarray  # (C, n_rows, n_cols)
    weight: np.ndarray  # (n_rows, n_cols)
    meta: dict = field(default_factory=dict)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


def _as_batch(gaussians, grid: BevGrid | None, k: float | None) -> ProjectedGaussians:
    if isinstance(gaussians, ProjectedGaussians):
        return gaussians
    if grid is None or k is None:
        raise ValueError("a list of BevGaussian2D needs the grid and k")
    return ProjectedGaussians.from_list(list(gaussians), grid, k)


def splat_forward(
    gaussians: ProjectedGaussians | list[BevGaussian2D],
    features: np.ndarray,
    grid: BevGrid | None = None,
    k: float | None = None,
    n_threads: int | None = None,
    backend: str | None = None,
    tile: int = TILE,
) -> BevFeatureMap:
    """Tiled rasteriser.

    Gaussians are binned into every ``tile x tile`` block their cull box
    touches; each block is then accumulated independently in increasing
    Gaussian order, so the output is bit-identical for any thread count.
    ``features`` is ``(N, C)``; its dtype sets the accumulation dtype.
    """
    batch = _as_batch(gaussians, grid, k)
    grid = batch.grid
    features = np.ascontiguousarray(features)
    if features.dtype not in (np.float32, np.float64):
        features = features.astype(np.float32)
    if features.ndim != 2 or features.shape[0] != len(batch):
        raise ValueError(f"features must be (N={len(batch)}, C), got {features.shape}")
    C = features.shape[1]
    out = np.zeros((C, grid.n_rows, grid.n_cols), dtype=features.dtype)
    weight = np.zeros((grid.n_rows, grid.n_cols), dtype=features.dtype)
    if len(batch):
        kern = get_kernels(backend)
        bbox, offsets, index = kern.bin_gaussians(
            np.ascontiguousarray(batch.mean), np.ascontiguousarray(batch.radius), grid.n_rows, grid.n_cols, tile
        )
        kern.render_tiles(
            np.ascontiguousarray(batch.mean),
            np.ascontiguousarray(batch.conic),
            np.ascontiguousarray(batch.opacity),
            features,
            batch.cutoff2,
            bbox,
            offsets,
            index,
            tile,
            out,
            weight,
            thread_count(n_threads),
        )
    return BevFeatureMap(out, weight)


@njit(cache=True)
def _oracle_loop(mean, conic, opacity, features, cutoff2, n_rows, n_cols):  # pragma: no cover - jitted
    n, n_ch = features.shape
    out = np.zeros((n_ch, n_rows, n_cols))
    weight = np.zeros((n_rows, n_cols))
    for r in range(n_rows):
        for c in range(n_cols):
            for g in range(n):
                dx = c + 0.5 - mean[g, 0]
                dy = r + 0.5 - mean[g, 1]
                m2 = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                if m2 > cutoff2:
                    continue
                w = opacity[g] * np.exp(-0.5 * m2)
                weight[r, c] += w
                for ch in range(n_ch):
                    out[ch, r, c] += features[g, ch] * w
    return out, weight


def splat_oracle(
    gaussians: ProjectedGaussians | list[BevGaussian2D],
    features: np.ndarray,
    grid: BevGrid | None = None,
    k: float | None = None,
) -> BevFeatureMap:
    """Reference render in float64: a plain loop over (cell, Gaussian, channel).

    No culling or tiling; the only shortcut is the Mahalanobis cutoff itself.
    """
    batch = _as_batch(gaussians, grid, k)
    grid = batch.grid
    features = np.ascontiguousarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != len(batch):
        raise ValueError(f"features must be (N={len(batch)}, C), got {features.shape}")
    out, weight = _oracle_loop(
        np.ascontiguousarray(batch.mean),
        np.ascontiguousarray(batch.conic),
        np.ascontiguousarray(batch.opacity),
        features,
        batch.cutoff2,
        grid.n_rows,
        grid.n_cols,
    )
    return BevFeatureMap(out, weight)
