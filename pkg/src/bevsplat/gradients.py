"""Analytic backward passes and finite-difference checks.

The differentiable chain is

    depth logits --softmax--> P --moments--> (mu3d, cov3d) --project--> (mean2d, cov2d)
    opacity logits --logistic--> alpha                                      |
    features ---------------------------------------------------------> splat --> upsample --> fuse

and the scalar being differentiated is ``L = sum(d_fused * fused)`` for a fixed
cotangent ``d_fused``. Matrix cotangents use the full-matrix convention
(``dL = sum_ij G_ij dM_ij``), so they are symmetric whenever the matrix is.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backend import get_kernels, thread_count
from .camera import Frustum
from .multiscale import fuse, fuse_adjoint, scaled_eps, upsample, upsample_adjoint
from .rasterizer import DEFAULT_EPS, BevFeatureMap, BevGrid, ProjectedGaussians, project_gaussians, splat_forward
from .uncertainty import (
    DepthDistribution,
    PixelGaussianSet,
    assemble_gaussians,
    filter_opacity,
    moments_3d,
    softmax_depth,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# primitives


@dataclass
class SplatGrads:
    d_features: np.ndarray  # (N, C)
    d_opacity: np.ndarray  # (N,)
    d_mean: np.ndarray  # (N, 2), (col, row)
    d_cov2d: np.ndarray  # (N, 2, 2), w.r.t. the unregularised projected covariance


def splat_backward(
    batch: ProjectedGaussians,
    features: np.ndarray,
    d_out: np.ndarray,
    n_threads: int | None = None,
    backend: str | None = None,
) -> SplatGrads:
    """Exact gradients of ``sum(d_out * splat_forward(batch, features))``.

    Cells beyond the cutoff contribute nothing, matching the forward
    truncation. The covariance cotangent is taken through the inverse
    (``dCov = -Q dQ Q``), the ``eps`` regulariser and, in ``scale`` mode, the
    ``k**2`` factor.
    """
    grid = batch.grid
    features = np.ascontiguousarray(features)
    if features.dtype not in (np.float32, np.float64):
        features = features.astype(np.float64)
    d_out = np.ascontiguousarray(d_out, dtype=np.float64)
    n, C = len(batch), features.shape[1]
    if d_out.shape != (C, grid.n_rows, grid.n_cols):
        raise ValueError(f"d_out must be {(C, grid.n_rows, grid.n_cols)}, got {d_out.shape}")
    if n == 0:
        return SplatGrads(np.zeros((0, C)), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2, 2)))
    kern = get_kernels(backend)
    mean = np.ascontiguousarray(batch.mean)
    bbox, _, _ = kern.bin_gaussians(mean, np.ascontiguousarray(batch.radius), grid.n_rows, grid.n_cols, 16)
    dF, dA, dM, dQ = kern.splat_backward(
        mean,
        np.ascontiguousarray(batch.conic),
        np.ascontiguousarray(batch.opacity),
        features,
        batch.cutoff2,
        bbox,
        d_out,
        thread_count(n_threads),
    )
    GQ = np.empty((n, 2, 2))
    GQ[:, 0, 0] = dQ[:, 0]
    GQ[:, 0, 1] = GQ[:, 1, 0] = dQ[:, 1]
    GQ[:, 1, 1] = dQ[:, 2]
    Q = np.empty((n, 2, 2))
    Q[:, 0, 0] = batch.conic[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = batch.conic[:, 1]
    Q[:, 1, 1] = batch.conic[:, 2]
    d_cov = -(Q @ GQ @ Q) * batch.cov_scale
    return SplatGrads(dF, dA, dM, d_cov)


def bev_projection_backward(d_cov2d: np.ndarray, scale_row: float, scale_col: float) -> np.ndarray:
    """Cotangent of the ego x/y covariance block from that of the BEV covariance.

    With the BEV covariance ``[[a, b], [b, c]]`` in (col, row) order,
    ``a = cov_yy * scale_col**2``, ``b = cov_yx * scale_col * scale_row`` and
    ``c = cov_xx * scale_row**2``, so

        dL/dcov_xx = dL/dc * scale_row**2
        dL/dcov_xy = dL/db * scale_row * scale_col
        dL/dcov_yy = dL/da * scale_col**2

    The incoming cotangent is symmetrised first. Accepts ``(..., 2, 2)``.
    """
    G = np.asarray(d_cov2d, dtype=np.float64)
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    d_a = G[..., 0, 0]
    d_b = G[..., 0, 1]
    d_c = G[..., 1, 1]
    out = np.empty(G.shape)
    out[..., 0, 0] = d_c * scale_row**2
    out[..., 0, 1] = out[..., 1, 0] = d_b * scale_row * scale_col
    out[..., 1, 1] = d_a * scale_col**2
    return out


def project_backward(batch: ProjectedGaussians, grads: SplatGrads) -> tuple[np.ndarray, np.ndarray]:
    """Map BEV mean/covariance cotangents back to ``(d_mu3d, d_cov3d)``."""
    grid = batch.grid
    n = len(batch)
    d_mu = np.zeros((n, 3))
    d_mu[:, 0] = grads.d_mean[:, 1] * grid.scale_row
    d_mu[:, 1] = grads.d_mean[:, 0] * grid.scale_col
    d_cov = np.zeros((n, 3, 3))
    d_cov[:, :2, :2] = bev_projection_backward(grads.d_cov2d, grid.scale_row, grid.scale_col)
    return d_mu, d_cov


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """Softmax over axis 0: ``dz = P * (dP - <dP, P>)``."""
    P = np.asarray(probs, dtype=np.float64)
    inner = (P * d_probs).sum(axis=0, keepdims=True)
    return P * (d_probs - inner)


def moments_backward(
    dist: DepthDistribution,
    frustum: Frustum,
    d_mu3d: np.ndarray,
    d_cov3d: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(d_probs, d_logits)``, both ``(B, H', W')``.

    Uses ``dmu/dP_j = p_j`` and ``dCov/dP_j = (p_j - mu)(p_j - mu)^T``; the
    cross terms drop because ``sum_i P_i (p_i - mu) = 0`` on the simplex.
    """
    P = np.asarray(dist.probs, dtype=np.float64)
    B, h, w = P.shape
    pts = frustum.points.reshape(h * w, B, 3).astype(np.float64)
    Pn = P.reshape(B, h * w).T
    mu = np.einsum("nb,nbi->ni", Pn, pts)
    delta = pts - mu[:, None, :]
    d_mu3d = np.asarray(d_mu3d, dtype=np.float64).reshape(h * w, 3)
    d_cov3d = np.asarray(d_cov3d, dtype=np.float64).reshape(h * w, 3, 3)
    dP = np.einsum("nbi,ni->nb", pts, d_mu3d) + np.einsum("nbi,nij,nbj->nb", delta, d_cov3d, delta)
    d_probs = dP.T.reshape(B, h, w)
    return d_probs, softmax_backward(P, d_probs)


def first_central_moment(dist: DepthDistribution, frustum: Frustum) -> np.ndarray:
    """``sum_i P_i (p_i - mu)`` per pixel, ``(N, 3)``; zero on the simplex."""
    P = np.asarray(dist.probs, dtype=np.float64)
    B, h, w = P.shape
    pts = frustum.points.reshape(h * w, B, 3).astype(np.float64)
    Pn = P.reshape(B, h * w).T
    mu = np.einsum("nb,nbi->ni", Pn, pts)
    return np.einsum("nb,nbi->ni", Pn, pts - mu[:, None, :])


# ---------------------------------------------------------------------------
# full chain


@dataclass
class CameraInputs:
    frustum: Frustum
    depth_logits: np.ndarray  # (B, H', W')
    opacity_logits: np.ndarray  # (H', W')
    features: np.ndarray  # (C, H', W')

    def astype(self, dtype) -> "CameraInputs":
        return CameraInputs(
            self.frustum,
            np.array(self.depth_logits, dtype=dtype),
            np.array(self.opacity_logits, dtype=dtype),
            np.array(self.features, dtype=dtype),
        )


@dataclass
class ChainSettings:
    grids: Sequence[BevGrid]
    k: float = 0.5
    eps: float = DEFAULT_EPS
    k_mode: str = "truncate"
    upsample_mode: str = "bilinear"
    fuse_mode: str = "sum"
    target: int | None = None
    opacity_threshold: float = 0.0
    dtype: type = np.float32
    n_threads: int | None = None
    backend: str | None = None

    @property
    def target_resolution(self) -> int:
        return self.target or max(g.n_rows for g in self.grids)


@dataclass
class ChainTape:
    settings: ChainSettings
    cameras: list[CameraInputs]
    dists: list[DepthDistribution]
    gaussians: PixelGaussianSet  # all cameras, before filtering
    kept: np.ndarray  # indices into ``gaussians`` surviving the opacity filter
    filtered: PixelGaussianSet
    batches: list[ProjectedGaussians]
    maps: list[BevFeatureMap]
    fused: BevFeatureMap
    counts: list[int] = field(default_factory=list)  # Gaussians per camera


@dataclass
class GradBuffers:
    d_features: np.ndarray  # (N, C), pixel order of the camera
    d_opacity_logits: np.ndarray  # (H', W')
    d_depth_logits: np.ndarray  # (B, H', W')
    d_mu3d: np.ndarray  # (N, 3)
    d_cov3d: np.ndarray  # (N, 3, 3)


def lift_cameras(cameras: Sequence[CameraInputs]) -> tuple[list[DepthDistribution], PixelGaussianSet, list[int]]:
    dists, sets = [], []
    for cam in cameras:
        dist = softmax_depth(cam.depth_logits)
        mu, cov = moments_3d(dist, cam.frustum)
        dists.append(dist)
        sets.append(assemble_gaussians(mu, cov, cam.opacity_logits, cam.features, cam.frustum.camera_index))
    return dists, PixelGaussianSet.concatenate(sets), [len(s) for s in sets]


def chain_forward(cameras: Sequence[CameraInputs], settings: ChainSettings) -> ChainTape:
    """Lift every camera, filter, render all scales, upsample and fuse."""
    cams = [c.astype(settings.dtype) for c in cameras]
    dists, gs, counts = lift_cameras(cams)
    filtered = filter_opacity(gs, settings.opacity_threshold)
    kept = np.flatnonzero(gs.opacity >= settings.opacity_threshold)
    target = settings.target_resolution
    batches, maps, ups = [], [], []
    finest = max(g.n_rows for g in settings.grids)
    for grid in settings.grids:
        eps = scaled_eps(settings.eps, grid, finest)
        batch = project_gaussians(filtered.mu3d, filtered.cov3d, filtered.opacity, grid, settings.k, eps, settings.k_mode)
        m = splat_forward(batch, filtered.features, n_threads=settings.n_threads, backend=settings.backend)
        m.meta["resolution"] = grid.n_rows
        batches.append(batch)
        maps.append(m)
        ups.append(upsample(m, target, settings.upsample_mode))
    fused = fuse(ups, settings.fuse_mode)
    fused.meta["scales"] = [g.n_rows for g in settings.grids]
    return ChainTape(settings, cams, dists, gs, kept, filtered, batches, maps, fused, counts)


def chain_backward(tape: ChainTape, d_fused: np.ndarray) -> list[GradBuffers]:
    """Per-camera gradients of ``sum(d_fused * tape.fused.values)``."""
    s = tape.settings
    d_fused = np.asarray(d_fused, dtype=np.float64)
    if d_fused.shape != tape.fused.values.shape:
        raise ValueError(f"cotangent shape {d_fused.shape} != fused map {tape.fused.values.shape}")
    d_ups = fuse_adjoint(d_fused, [m.channels for m in tape.maps], s.fuse_mode)
    nk = len(tape.kept)
    C = tape.gaussians.channels
    dF = np.zeros((nk, C))
    dA = np.zeros(nk)
    d_mu = np.zeros((nk, 3))
    d_cov = np.zeros((nk, 3, 3))
    for batch, fmap, d_up in zip(tape.batches, tape.maps, d_ups):
        d_map = upsample_adjoint(d_up, fmap.resolution, s.upsample_mode)
        sg = splat_backward(batch, tape.filtered.features, d_map, n_threads=s.n_threads, backend=s.backend)
        dF += sg.d_features
        dA += sg.d_opacity
        m, c = project_backward(batch, sg)
        d_mu += m
        d_cov += c

    N = len(tape.gaussians)
    full_F = np.zeros((N, C))
    full_A = np.zeros(N)
    full_mu = np.zeros((N, 3))
    full_cov = np.zeros((N, 3, 3))
    full_F[tape.kept] = dF
    full_A[tape.kept] = dA
    full_mu[tape.kept] = d_mu
    full_cov[tape.kept] = d_cov

    out = []
    start = 0
    alpha = tape.gaussians.opacity.astype(np.float64)
    for cam, dist, n in zip(tape.cameras, tape.dists, tape.counts):
        sl = slice(start, start + n)
        start += n
        h, w = cam.opacity_logits.shape
        a = alpha[sl]
        d_op_logits = (full_A[sl] * a * (1.0 - a)).reshape(h, w)
        _, d_depth = moments_backward(dist, cam.frustum, full_mu[sl], full_cov[sl])
        out.append(GradBuffers(full_F[sl], d_op_logits, d_depth, full_mu[sl], full_cov[sl]))
    return out


def chain_loss(cameras: Sequence[CameraInputs], settings: ChainSettings, d_fused: np.ndarray) -> float:
    tape = chain_forward(cameras, settings)
    return float(np.sum(d_fused * tape.fused.values.astype(np.float64)))


# ---------------------------------------------------------------------------
# finite-difference checking


def active_signature(tape: ChainTape) -> tuple:
    """Which (Gaussian, cell) pairs fall inside the cutoff, for every scale.

    Dense; meant for the small scenes used by gradient checks.
    """
    sig = [tuple(tape.kept.tolist())]
    for batch in tape.batches:
        g = batch.grid
        rows, cols = np.meshgrid(np.arange(g.n_rows) + 0.5, np.arange(g.n_cols) + 0.5, indexing="ij")
        dx = cols.ravel()[None, :] - batch.mean[:, 0:1]
        dy = rows.ravel()[None, :] - batch.mean[:, 1:2]
        A, B, Cq = (batch.conic[:, i : i + 1] for i in range(3))
        m2 = A * dx * dx + 2.0 * B * dx * dy + Cq * dy * dy
        sig.append(np.packbits(m2 <= batch.cutoff2).tobytes())
    return tuple(sig)


@dataclass
class GroupReport:
    max_rel_err: float
    mean_rel_err: float
    checked: int
    excluded: int
    floored: int = 0  # entries below the difference quotient's resolution

    def to_dict(self) -> dict:
        return vars(self).copy()


@dataclass
class GradCheckReport:
    dtype: str
    h: float
    groups: dict[str, GroupReport]
    threshold: float

    @property
    def max_rel_err(self) -> float:
        return max((g.max_rel_err for g in self.groups.values()), default=0.0)

    @property
    def excluded(self) -> int:
        return sum(g.excluded for g in self.groups.values())

    @property
    def floored(self) -> int:
        return sum(g.floored for g in self.groups.values())

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.threshold

    def to_dict(self) -> dict:
        return {
            "dtype": self.dtype,
            "h": self.h,
            "threshold": self.threshold,
            "max_rel_err": self.max_rel_err,
            "excluded": self.excluded,
            "floored": self.floored,
            "passed": self.passed,
            "groups": {k: v.to_dict() for k, v in self.groups.items()},
        }


GRAD_TOLERANCE = {"f32": 1e-3, "f64": 1e-6}
FD_STEP = 1e-3


def resolution_floor(h: float) -> float:
    """Smallest gradient, relative to its group's largest, that an f64 difference
    quotient with step ``h`` resolves to the f64 tolerance: ``eps / (h * tol)``.

    Map cells carry roundoff of about ``eps`` times the map scale, so the
    quotient's absolute noise is about ``eps / h`` of it. Entries below the
    floor have their error measured against the floor instead of themselves.
    """
    return float(np.finfo(np.float64).eps) / (h * GRAD_TOLERANCE["f64"])


def rel_err(a: np.ndarray, f: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    denom = np.where(denom > 0, denom, 1.0)
    return np.abs(a - f) / denom


def grad_check(
    cameras: Sequence[CameraInputs],
    settings: ChainSettings,
    d_fused: np.ndarray,
    dtype: str = "f64",
    h: float | None = None,
) -> GradCheckReport:
    """Compare analytic chain gradients with central differences.

    The analytic gradient runs at ``dtype``; differences are always evaluated
    through the float64 forward. Perturbations that change which
    (Gaussian, cell) pairs are inside the cutoff (or which Gaussians pass the
    opacity filter) straddle a discontinuity; they are excluded and counted.
    """
    if dtype not in GRAD_TOLERANCE:
        raise ValueError(f"dtype must be one of {sorted(GRAD_TOLERANCE)}")
    h = FD_STEP if h is None else h
    np_dtype = np.float32 if dtype == "f32" else np.float64
    analytic_settings = ChainSettings(**{**vars(settings), "dtype": np_dtype})
    fd_settings = ChainSettings(**{**vars(settings), "dtype": np.float64})
    tape = chain_forward(cameras, analytic_settings)
    grads = chain_backward(tape, d_fused)
    base = [c.astype(np.float64) for c in cameras]
    base_sig = active_signature(chain_forward(base, fd_settings))

    per_group: dict[str, tuple[list[float], list[float], int]] = {
        "features": ([], [], 0),
        "opacity_logits": ([], [], 0),
        "depth_logits": ([], [], 0),
    }
    for ci, cam in enumerate(base):
        g = grads[ci]
        groups = {
            "features": ("features", g.d_features.T.reshape(cam.features.shape)),
            "opacity_logits": ("opacity_logits", g.d_opacity_logits),
            "depth_logits": ("depth_logits", g.d_depth_logits),
        }
        for name, (attr, analytic) in groups.items():
            an_list, fd_list, excluded = per_group[name]
            arr = getattr(cam, attr)
            for idx in np.ndindex(arr.shape):
                x0 = arr[idx]
                step = h * max(1.0, abs(x0))
                maps = []
                sigs = []
                for mult in (2.0, 1.0, -1.0, -2.0):
                    arr[idx] = x0 + mult * step
                    t = chain_forward(base, fd_settings)
                    maps.append(t.fused.values)
                    sigs.append(active_signature(t))
                arr[idx] = x0
                if any(sg != base_sig for sg in sigs):
                    excluded += 1
                    continue
                an_list.append(float(analytic[idx]))
                # fourth-order central stencil, differenced per cell before contracting with
                # d_fused: cells the perturbation misses cancel exactly instead of adding roundoff
                stencil = 8.0 * (maps[1] - maps[2]) - (maps[0] - maps[3])
                fd_list.append(float(np.sum(d_fused * stencil)) / (12.0 * step))
            per_group[name] = (an_list, fd_list, excluded)

    reports = {}
    for name, (an_list, fd_list, excluded) in per_group.items():
        a = np.asarray(an_list)
        f = np.asarray(fd_list)
        if a.size:
            scale = max(np.abs(a).max(), np.abs(f).max())
            floor = resolution_floor(h) * scale
            e = rel_err(a, f, floor)
            floored = int(np.count_nonzero(np.maximum(np.abs(a), np.abs(f)) < floor))
            reports[name] = GroupReport(float(e.max()), float(e.mean()), int(a.size), excluded, floored)
        else:
            reports[name] = GroupReport(0.0, 0.0, 0, excluded)
    return GradCheckReport(dtype, h, reports, GRAD_TOLERANCE[dtype])


def random_check_case(seed: int, channels: int = 2) -> tuple[list[CameraInputs], ChainSettings, np.ndarray]:
    """A tiny randomized single-camera chain for gradient checking.

    Settings alternate between truncate/scale and bilinear/nearest so a batch
    of seeds covers every branch of the backward pass.
    """
    from .camera import build_frustum, look_camera, make_bins
    from .multiscale import scale_grids

    rng = np.random.default_rng(seed)
    cam = look_camera(float(rng.uniform(0.0, 2 * np.pi)), 1.5, (12, 16), 70.0)
    fr = build_frustum(cam, make_bins(2.0, 14.0, 6), 4)
    h, w, B = fr.shape
    inputs = CameraInputs(
        fr,
        rng.normal(0.0, 2.0, (B, h, w)),
        rng.normal(0.0, 1.0, (h, w)),
        rng.normal(0.0, 1.0, (channels, h, w)),
    )
    grids = scale_grids(BevGrid.square(12.0, 24), [12, 24])
    settings = ChainSettings(
        grids,
        k=float(rng.uniform(0.5, 3.0)),
        eps=0.3,
        k_mode=("truncate", "scale")[seed % 2],
        upsample_mode=("bilinear", "nearest")[(seed // 2) % 2],
    )
    d_fused = rng.normal(size=(channels, 24, 24))
    return [inputs], settings, d_fused


def grad_check_random(n_cases: int, dtype: str = "f64", seed: int = 0) -> list[GradCheckReport]:
    reports = []
    for i in range(n_cases):
        cams, st, d = random_check_case(seed + i)
        reports.append(grad_check(cams, st, d, dtype))
    return reports
