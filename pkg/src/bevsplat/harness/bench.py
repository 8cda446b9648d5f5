"""Wall-clock measurements: per-stage pipeline timings, tiled vs oracle, N-scaling."""

from __future__ import annotations

import time
from statistics import median
from typing import Callable, Sequence

import numpy as np

from ..multiscale import fuse, scale_grids, scaled_eps, upsample
from ..rasterizer import BevGrid, ProjectedGaussians, project_gaussians, splat_forward, splat_oracle
from ..tensor_io import RunConfig
from ..uncertainty import filter_opacity
from .pipeline import lift_scene


def random_splat_case(
    rng: np.random.Generator,
    n: int,
    resolution: int = 200,
    channels: int = 8,
    k: float = 3.0,
    std_range: tuple[float, float] = (0.1, 1.5),
    dtype=np.float32,
) -> tuple[ProjectedGaussians, np.ndarray]:
    """``n`` random Gaussians on a ±50 m grid with per-axis spreads in ``std_range`` metres."""
    grid = BevGrid.square(50.0, resolution)
    mu = np.c_[rng.uniform(-52.0, 52.0, (n, 2)), rng.uniform(0.0, 2.0, n)]
    L = rng.normal(size=(n, 3, 3)) * rng.uniform(*std_range, size=(n, 1, 1))
    cov = L @ L.transpose(0, 2, 1) / 3.0
    batch = project_gaussians(mu, cov, rng.uniform(0.0, 1.0, n), grid, k)
    feats = rng.normal(size=(n, channels)).astype(dtype)
    return batch, feats


def time_call(fn: Callable[[], object], reps: int, warmup: int = 1) -> float:
    """Median wall-clock milliseconds of ``fn`` over ``reps`` warm runs."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(1e3 * (time.perf_counter() - t0))
    return median(samples)


def bench_render(
    n: int,
    resolution: int = 200,
    channels: int = 8,
    k: float = 3.0,
    reps: int = 10,
    oracle_reps: int = 3,
    seed: int = 0,
    n_threads: int | None = None,
    backend: str | None = None,
) -> dict:
    rng = np.random.default_rng(seed)
    batch, feats = random_splat_case(rng, n, resolution, channels, k)
    tiled = time_call(lambda: splat_forward(batch, feats, n_threads=n_threads, backend=backend), reps)
    out = {"n": n, "resolution": resolution, "channels": channels, "k": k, "tiled_ms": tiled}
    if oracle_reps > 0:
        oracle = time_call(lambda: splat_oracle(batch, feats), oracle_reps)
        out.update(oracle_ms=oracle, speedup=oracle / tiled)
    return out


def bench_scaling(
    ns: Sequence[int],
    resolution: int = 200,
    channels: int = 8,
    k: float = 3.0,
    reps: int = 10,
    seed: int = 0,
    n_threads: int | None = None,
) -> list[dict]:
    """Tiled render time for each ``n``, with the ratio to the previous entry."""
    rows, prev = [], None
    for n in ns:
        r = bench_render(n, resolution, channels, k, reps, 0, seed, n_threads)
        if prev is not None:
            r["ratio"] = r["tiled_ms"] / prev
        prev = r["tiled_ms"]
        rows.append(r)
    return rows


def bench_pipeline(cfg: RunConfig, scene, reps: int = 10, n_threads: int | None = None) -> dict[str, float]:
    """Median milliseconds per stage plus ``total`` for one full forward pass."""
    base = BevGrid.from_config(cfg.bev)
    grids = scale_grids(base, cfg.scales)
    target = max(cfg.scales)
    dt = np.float32 if cfg.dtype == "f32" else np.float64
    samples: dict[str, list[float]] = {}

    def lap(name: str, t0: float) -> float:
        t1 = time.perf_counter()
        samples.setdefault(name, []).append(1e3 * (t1 - t0))
        return t1

    for rep in range(reps + 1):
        t_start = t = time.perf_counter()
        gs = lift_scene(cfg, scene)
        t = lap("lift", t)
        kept = filter_opacity(gs, cfg.opacity_threshold)
        feats = kept.features.astype(dt)
        t = lap("filter", t)
        ups = []
        for grid in grids:
            batch = project_gaussians(
                kept.mu3d, kept.cov3d, kept.opacity, grid, cfg.k, scaled_eps(cfg.dilation, grid, target), cfg.k_mode
            )
            t = lap(f"project_{grid.n_rows}", t)
            m = splat_forward(batch, feats, n_threads=n_threads)
            t = lap(f"render_{grid.n_rows}", t)
            ups.append(upsample(m, target, cfg.upsample_mode))
            t = lap(f"upsample_{grid.n_rows}", t)
        fuse(ups, cfg.fuse_mode)
        t = lap("fuse", t)
        lap("total", t_start)
        if rep == 0:  # warm-up
            samples = {}
    return {k: median(v) for k, v in samples.items()}
