"""Depth distributions to 3D Gaussians.

Per feature pixel, a categorical distribution over the depth bins is turned
into a depth mean/spread and, through the frustum points, into a 3D mean and
covariance. Together with an opacity and a feature vector this gives one
Gaussian per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import DepthBinning, Frustum


@dataclass(frozen=True)
class DepthDistribution:
    probs: np.ndarray  # (B, H', W')
    logits: np.ndarray  # (B, H', W')


@dataclass(frozen=True)
class DepthMoments:
    mu: np.ndarray
    sigma: np.ndarray
    range_lo: np.ndarray
    range_hi: np.ndarray


@dataclass
class PixelGaussianSet:
    mu3d: np.ndarray  # (N, 3)
    cov3d: np.ndarray  # (N, 3, 3)
    opacity: np.ndarray  # (N,)
    features: np.ndarray  # (N, C)
    camera_index: np.ndarray = field(default=None)  # (N,) int
    pixel: np.ndarray = field(default=None)  # (N, 2) int, (row, col) on the feature grid
    retained_fraction: float = 1.0

    def __post_init__(self) -> None:
        n = self.mu3d.shape[0]
        if self.camera_index is None:
            self.camera_index = np.zeros(n, dtype=np.int64)
        if self.pixel is None:
            self.pixel = np.zeros((n, 2), dtype=np.int64)

    def __len__(self) -> int:
        return self.mu3d.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> "PixelGaussianSet":
        return PixelGaussianSet(
            self.mu3d[idx],
            self.cov3d[idx],
            self.opacity[idx],
            self.features[idx],
            self.camera_index[idx],
            self.pixel[idx],
        )

    @staticmethod
    def concatenate(sets: list["PixelGaussianSet"]) -> "PixelGaussianSet":
        if not sets:
            raise ValueError("no Gaussian sets to concatenate")
        return PixelGaussianSet(
            np.concatenate([s.mu3d for s in sets]),
            np.concatenate([s.cov3d for s in sets]),
            np.concatenate([s.opacity for s in sets]),
            np.concatenate([s.features for s in sets]),
            np.concatenate([s.camera_index for s in sets]),
            np.concatenate([s.pixel for s in sets]),
        )


def softmax_depth(logits: np.ndarray) -> DepthDistribution:
    """Softmax over axis 0 with max subtraction."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("depth logits must be finite")
    z = logits.astype(np.float64) - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=0, keepdims=True)
    return DepthDistribution(probs.astype(logits.dtype, copy=False), logits)


def depth_moments(dist: DepthDistribution, bins: DepthBinning, k: float) -> DepthMoments:
    P = np.asarray(dist.probs, dtype=np.float64)
    if P.shape[0] != bins.bins:
        raise ValueError(f"distribution has {P.shape[0]} bins, binning has {bins.bins}")
    d = bins.values.reshape((-1,) + (1,) * (P.ndim - 1))
    mu = (P * d).sum(axis=0)
    var = (P * (d - mu) ** 2).sum(axis=0)
    sigma = np.sqrt(np.maximum(var, 0.0))
    return DepthMoments(mu, sigma, mu - k * sigma, mu + k * sigma)


def moments_3d(dist: DepthDistribution, frustum: Frustum) -> tuple[np.ndarray, np.ndarray]:
    """Probability-weighted mean and covariance of each pixel's frustum points.

    Returns ``(mu3d, cov3d)`` with shapes ``(N, 3)`` and ``(N, 3, 3)``, pixels
    flattened row-major. Always evaluated in float64 (the central-moment form
    loses digits in float32 for far bins).
    """
    P = np.asarray(dist.probs, dtype=np.float64)
    B, h, w = P.shape
    if frustum.shape != (h, w, B):
        raise ValueError(f"frustum {frustum.shape} does not match distribution {(h, w, B)}")
    pts = frustum.points.reshape(h * w, B, 3).astype(np.float64)
    Pn = P.reshape(B, h * w).T  # (N, B)
    mu = np.einsum("nb,nbi->ni", Pn, pts)
    delta = pts - mu[:, None, :]
    cov = np.einsum("nb,nbi,nbj->nij", Pn, delta, delta)
    return mu, cov


def logistic(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def assemble_gaussians(
    mu3d: np.ndarray,
    cov3d: np.ndarray,
    opacity_logits: np.ndarray,
    features: np.ndarray,
    camera_index: int = 0,
) -> PixelGaussianSet:
    """Bundle per-pixel moments with opacity and features.

    ``opacity_logits`` is ``(H', W')`` and ``features`` is ``(C, H', W')``;
    both are flattened row-major to line up with ``mu3d``.
    """
    opacity_logits = np.asarray(opacity_logits)
    features = np.asarray(features)
    if features.ndim != 3 or features.shape[0] < 1:
        raise ValueError("features must be (C, H', W') with C >= 1")
    C, h, w = features.shape
    n = h * w
    if opacity_logits.shape != (h, w):
        raise ValueError(f"opacity logits {opacity_logits.shape} vs feature grid {(h, w)}")
    if mu3d.shape != (n, 3) or cov3d.shape != (n, 3, 3):
        raise ValueError(f"moments do not match {n} pixels")
    rows, cols = np.divmod(np.arange(n), w)
    return PixelGaussianSet(
        mu3d=mu3d,
        cov3d=cov3d,
        opacity=logistic(opacity_logits).reshape(n).astype(features.dtype),
        features=features.reshape(C, n).T.copy(),
        camera_index=np.full(n, camera_index, dtype=np.int64),
        pixel=np.stack([rows, cols], axis=1),
    )


def filter_opacity(gs: PixelGaussianSet, threshold: float) -> PixelGaussianSet:
    """Keep Gaussians with ``opacity >= threshold`` in their original order."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"opacity threshold must lie in [0, 1], got {threshold}")
    keep = np.flatnonzero(gs.opacity >= threshold)
    out = gs.subset(keep)
    out.retained_fraction = len(keep) / len(gs) if len(gs) else 1.0
    return out


def lift_camera(
    depth_logits: np.ndarray,
    opacity_logits: np.ndarray,
    features: np.ndarray,
    frustum: Frustum,
) -> PixelGaussianSet:
    dist = softmax_depth(depth_logits)
    mu, cov = moments_3d(dist, frustum)
    return assemble_gaussians(mu, cov, opacity_logits, features, frustum.camera_index)
