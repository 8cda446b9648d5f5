"""Occupancy IoU, distance bands and threshold selection."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..rasterizer import BevGrid


def _distance_keep(shape: tuple[int, int], grid: BevGrid | None, min_distance: float) -> np.ndarray:
    if min_distance <= 0:
        return np.ones(shape, dtype=bool)
    if grid is None:
        raise ValueError("min_distance > 0 needs the grid geometry")
    if grid.shape != shape:
        raise ValueError(f"grid {grid.shape} does not match mask {shape}")
    X, Y = grid.cell_centers_metric()
    return np.hypot(X, Y) >= min_distance


def compute_iou(pred, gt, min_distance: float = 0.0, grid: BevGrid | None = None) -> float:
    """|pred & gt| / |pred | gt| over cells at least ``min_distance`` from the ego origin.

    An empty union scores 1.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if min_distance < 0:
        raise ValueError("min_distance must be >= 0")
    keep = _distance_keep(pred.shape, grid, min_distance)
    inter = np.count_nonzero(pred & gt & keep)
    union = np.count_nonzero((pred | gt) & keep)
    return 1.0 if union == 0 else inter / union


def banded_iou(pred, gt, grid: BevGrid, distances: Sequence[float]) -> list[tuple[float, float]]:
    return [(float(d), compute_iou(pred, gt, d, grid)) for d in distances]


def best_threshold(response: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Threshold ``t`` maximising IoU of ``response > t`` against ``gt``.

    ``t`` ranges over the distinct response levels, so at least the lowest
    level is always predicted negative (a flat map predicts nothing). Ties in
    IoU go to the higher threshold. Returns ``(t, iou)``.
    """
    r = np.asarray(response, dtype=np.float64).ravel()
    g = np.asarray(gt).astype(bool).ravel()
    if r.shape != g.shape:
        raise ValueError("response and gt differ in size")
    n_gt = int(g.sum())
    empty_iou = 1.0 if n_gt == 0 else 0.0
    if r.size == 0:
        return 0.0, empty_iou
    order = np.argsort(-r, kind="stable")
    rs, gs = r[order], g[order]
    tp = np.cumsum(gs)
    n_pred = np.arange(1, r.size + 1)
    # only cut after the last of a run of equal values
    last = np.ones(r.size, dtype=bool)
    last[:-1] = rs[1:] != rs[:-1]
    last[-1] = False  # "everything positive" has no threshold among the levels
    union = n_gt + n_pred - tp
    iou = np.where(union > 0, tp / np.maximum(union, 1), 1.0)
    iou = np.where(last, iou, -1.0)
    j = int(np.argmax(iou))
    if iou[j] <= empty_iou:
        return float(rs[0]), empty_iou
    # threshold sits on the next lower level so that ``> t`` selects exactly the cut
    t = float(rs[j + 1])
    return t, float(iou[j])
