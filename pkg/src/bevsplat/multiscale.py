"""Rendering one Gaussian set at several BEV resolutions and fusing the results.

Upsampling is separable and linear: ``out[c] = U_rows @ src[c] @ U_cols.T``.
Keeping the interpolation matrices explicit gives the adjoint for free, which
the backward pass needs.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .rasterizer import (
    DEFAULT_EPS,
    BevFeatureMap,
    BevGrid,
    ProjectedGaussians,
    project_gaussians,
    splat_forward,
)
from .uncertainty import PixelGaussianSet


def scale_grids(base: BevGrid, resolutions: Sequence[int]) -> list[BevGrid]:
    return [BevGrid(base.x_min, base.x_max, base.y_min, base.y_max, r, r) for r in resolutions]


def scaled_eps(eps: float, grid: BevGrid, finest: int) -> float:
    """``eps`` is given in cell² of the finest grid; keep it fixed in metres²."""
    return eps * (grid.n_rows / finest) ** 2


def render_multiscale(
    gaussians: PixelGaussianSet,
    grids: Sequence[BevGrid],
    k: float,
    eps: float = DEFAULT_EPS,
    k_mode: str = "truncate",
    n_threads: int | None = None,
    backend: str | None = None,
    dtype=None,
) -> tuple[list[BevFeatureMap], list[ProjectedGaussians]]:
    """Project and splat ``gaussians`` once per grid.

    Covariances are re-projected for every grid since cells-per-metre differs;
    ``eps`` is in cell² of the finest grid and shrinks on coarser ones so every
    scale samples the same metric field. Returns the per-scale maps and the projected batches (needed for backward).
    """
    if not grids:
        raise ValueError("need at least one grid")
    for g in grids[1:]:
        if not g.same_extent(grids[0]):
            raise ValueError("all multiscale grids must share the same metric extent")
    feats = gaussians.features if dtype is None else gaussians.features.astype(dtype)
    finest = max(g.n_rows for g in grids)
    maps, batches = [], []
    for grid in grids:
        e = scaled_eps(eps, grid, finest)
        batch = project_gaussians(gaussians.mu3d, gaussians.cov3d, gaussians.opacity, grid, k, e, k_mode)
        m = splat_forward(batch, feats, n_threads=n_threads, backend=backend)
        m.meta["resolution"] = grid.n_rows
        maps.append(m)
        batches.append(batch)
    return maps, batches


def interp_matrix(n_src: int, n_dst: int, mode: str) -> np.ndarray:
    """``(n_dst, n_src)`` 1D upsampling operator.

    ``bilinear`` samples at destination cell centres mapped into source cell
    coordinates (half-cell aligned); at the borders it extrapolates linearly
    from the two outermost source cells, so constant and linear signals are
    reproduced exactly everywhere.
    """
    if n_dst % n_src:
        raise ValueError(f"target {n_dst} is not an integer multiple of source {n_src}")
    f = n_dst // n_src
    U = np.zeros((n_dst, n_src))
    if mode == "nearest" or n_src == 1:
        U[np.arange(n_dst), np.arange(n_dst) // f] = 1.0
        return U
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    s = (np.arange(n_dst) + 0.5) / f - 0.5
    i0 = np.clip(np.floor(s).astype(int), 0, n_src - 2)
    t = s - i0
    U[np.arange(n_dst), i0] = 1.0 - t
    U[np.arange(n_dst), i0 + 1] = t
    return U


def upsample(fmap: BevFeatureMap, target: int, mode: str = "bilinear") -> BevFeatureMap:
    n_rows, n_cols = fmap.resolution
    if target % n_rows or target % n_cols:
        raise ValueError(f"target {target} is not an integer multiple of {n_rows}x{n_cols}")
    if (n_rows, n_cols) == (target, target):
        return fmap
    Ur = interp_matrix(n_rows, target, mode)
    Uc = interp_matrix(n_cols, target, mode)
    vals = (Ur @ fmap.values.astype(np.float64) @ Uc.T).astype(fmap.values.dtype)
    weight = (Ur @ fmap.weight.astype(np.float64) @ Uc.T).astype(fmap.weight.dtype)
    return BevFeatureMap(vals, weight, dict(fmap.meta, upsampled_from=n_rows, upsample_mode=mode))


def upsample_adjoint(grad: np.ndarray, source: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    """Transpose of :func:`upsample` applied to a ``(C, T, T)`` cotangent."""
    target = grad.shape[1]
    if source == (target, target):
        return grad
    Ur = interp_matrix(source[0], target, mode)
    Uc = interp_matrix(source[1], target, mode)
    return Ur.T @ np.asarray(grad, dtype=np.float64) @ Uc


def fuse(maps: Sequence[BevFeatureMap], mode: str = "sum") -> BevFeatureMap:
    """Combine equally sized maps channel-wise (``sum``) or by stacking (``concat``).

    These are linear stand-ins for a learned fusion block.
    """
    if not maps:
        raise ValueError("nothing to fuse")
    res = maps[0].resolution
    if any(m.resolution != res for m in maps):
        raise ValueError("upsample all maps to one resolution before fusing")
    if mode == "sum":
        C = maps[0].channels
        if any(m.channels != C for m in maps):
            raise ValueError("sum fusion needs equal channel counts")
        vals = maps[0].values.copy()
        weight = maps[0].weight.copy()
        for m in maps[1:]:
            vals += m.values
            weight += m.weight
    elif mode == "concat":
        vals = np.concatenate([m.values for m in maps], axis=0)
        weight = sum((m.weight for m in maps[1:]), maps[0].weight.copy())
    else:
        raise ValueError(f"unknown fuse mode {mode!r}")
    return BevFeatureMap(vals, weight, {"fuse_mode": mode, "fusion": "linear stand-in", "n_maps": len(maps)})


def fuse_adjoint(grad: np.ndarray, channels: Sequence[int], mode: str = "sum") -> list[np.ndarray]:
    if mode == "sum":
        return [grad for _ in channels]
    splits = np.cumsum(channels)[:-1]
    return list(np.split(grad, splits, axis=0))


def render_fused(
    gaussians: PixelGaussianSet,
    grids: Sequence[BevGrid],
    k: float,
    target: int | None = None,
    eps: float = DEFAULT_EPS,
    k_mode: str = "truncate",
    upsample_mode: str = "bilinear",
    fuse_mode: str = "sum",
    n_threads: int | None = None,
    dtype=None,
) -> tuple[BevFeatureMap, list[BevFeatureMap]]:
    """Render every scale, upsample to ``target`` and fuse."""
    maps, _ = render_multiscale(gaussians, grids, k, eps, k_mode, n_threads=n_threads, dtype=dtype)
    target = target or max(g.n_rows for g in grids)
    up = [upsample(m, target, upsample_mode) for m in maps]
    return fuse(up, fuse_mode), maps
