"""Pure-numpy fallback for the compiled splat kernels.

Same signatures and semantics as ``_splat_ext``. Each tile is evaluated as a
dense (gaussians x cells) block, so results agree with the compiled path to
float roundoff but not bit-for-bit (summation order differs).
"""

from __future__ import annotations

import numpy as np


def bin_gaussians(mean, radius, n_rows, n_cols, tile):
    mean = np.asarray(mean, dtype=np.float64)
    radius = np.asarray(radius, dtype=np.float64)
    n = mean.shape[0]
    c0 = np.maximum(np.ceil(mean[:, 0] - radius - 0.5), 0)
    c1 = np.minimum(np.floor(mean[:, 0] + radius - 0.5), n_cols - 1)
    r0 = np.maximum(np.ceil(mean[:, 1] - radius - 0.5), 0)
    r1 = np.minimum(np.floor(mean[:, 1] + radius - 0.5), n_rows - 1)
    empty = (c0 > c1) | (r0 > r1)
    bbox = np.stack([r0, r1, c0, c1], axis=1)
    bbox[empty] = (1, 0, 0, 0)
    bbox = bbox.astype(np.int32)

    tiles_r = -(-n_rows // tile)
    tiles_c = -(-n_cols // tile)
    lists: list[list[int]] = [[] for _ in range(tiles_r * tiles_c)]
    for g in range(n):
        gr0, gr1, gc0, gc1 = bbox[g]
        if gr0 > gr1:
            continue
        for tr in range(gr0 // tile, gr1 // tile + 1):
            for tc in range(gc0 // tile, gc1 // tile + 1):
                lists[tr * tiles_c + tc].append(g)
    counts = np.zeros(tiles_r * tiles_c + 1, dtype=np.int64)
    counts[1:] = np.cumsum([len(lst) for lst in lists])
    index = np.fromiter((g for lst in lists for g in lst), dtype=np.int64, count=int(counts[-1]))
    return bbox, counts, index


def render_tiles(mean, conic, opacity, features, cutoff2, bbox, offsets, index, tile, out, weight, n_threads):
    n_ch, n_rows, n_cols = out.shape
    tiles_c = -(-n_cols // tile)
    n_tiles = (-(-n_rows // tile)) * tiles_c
    for t in range(n_tiles):
        ids = index[offsets[t] : offsets[t + 1]]
        if ids.size == 0:
            continue
        tr0 = (t // tiles_c) * tile
        tc0 = (t % tiles_c) * tile
        rows = np.arange(tr0, min(tr0 + tile, n_rows))
        cols = np.arange(tc0, min(tc0 + tile, n_cols))
        dy = rows[None, :, None] + 0.5 - mean[ids, 1][:, None, None]
        dx = cols[None, None, :] + 0.5 - mean[ids, 0][:, None, None]
        A, B, C = (conic[ids, i][:, None, None] for i in range(3))
        m2 = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
        inside = (
            (m2 <= cutoff2)
            & (rows[None, :, None] >= bbox[ids, 0][:, None, None])
            & (rows[None, :, None] <= bbox[ids, 1][:, None, None])
            & (cols[None, None, :] >= bbox[ids, 2][:, None, None])
            & (cols[None, None, :] <= bbox[ids, 3][:, None, None])
        )
        w = np.where(inside, opacity[ids][:, None, None] * np.exp(-0.5 * m2), 0.0)
        block = np.einsum("gc,grw->crw", features[ids].astype(np.float64), w)
        out[:, rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] += block.astype(out.dtype)
        weight[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] += w.sum(axis=0).astype(weight.dtype)


def splat_backward(mean, conic, opacity, features, cutoff2, bbox, d_out, n_threads):
    n, n_ch = features.shape
    dF = np.zeros((n, n_ch))
    dA = np.zeros(n)
    dM = np.zeros((n, 2))
    dQ = np.zeros((n, 3))
    feats = np.asarray(features, dtype=np.float64)
    for g in range(n):
        r0, r1, c0, c1 = (int(v) for v in bbox[g])
        if r0 > r1:
            continue
        dy = np.arange(r0, r1 + 1)[:, None] + 0.5 - mean[g, 1]
        dx = np.arange(c0, c1 + 1)[None, :] + 0.5 - mean[g, 0]
        A, B, C = conic[g]
        m2 = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
        e = np.where(m2 <= cutoff2, np.exp(-0.5 * m2), 0.0)
        patch = d_out[:, r0 : r1 + 1, c0 : c1 + 1]
        gdot = np.tensordot(feats[g], patch, axes=(0, 0))
        dF[g] = opacity[g] * (patch * e).sum(axis=(1, 2))
        dA[g] = (e * gdot).sum()
        s = opacity[g] * e * gdot
        dM[g, 0] = (s * (A * dx + B * dy)).sum()
        dM[g, 1] = (s * (B * dx + C * dy)).sum()
        dQ[g, 0] = -0.5 * (s * dx * dx).sum()
        dQ[g, 1] = -0.5 * (s * dx * dy).sum()
        dQ[g, 2] = -0.5 * (s * dy * dy).sum()
    return dF, dA, dM, dQ
