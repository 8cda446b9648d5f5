# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tile binning, tiled forward splat and per-Gaussian backward.

Geometry (offsets, Mahalanobis distance, kernel) is evaluated in double for
every dtype so truncation decisions agree with the float64 oracle; only the
feature accumulation uses the output dtype.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from cython.parallel cimport prange
from libc.math cimport exp, ceil, floor

cnp.import_array()


def bin_gaussians(
    const double[:, ::1] mean,
    const double[::1] radius,
    int n_rows,
    int n_cols,
    int tile,
):
    """Assign each Gaussian to every tile its cull box overlaps.

    Returns ``(bbox, offsets, index)``: ``bbox[g] = (r0, r1, c0, c1)`` inclusive
    cell ranges (``r0 > r1`` when empty), and CSR-style per-tile lists in
    increasing Gaussian order.
    """
    cdef Py_ssize_t n = mean.shape[0]
    cdef int tiles_r = (n_rows + tile - 1) // tile
    cdef int tiles_c = (n_cols + tile - 1) // tile
    cdef cnp.ndarray[cnp.int32_t, ndim=2] bbox_arr = np.empty((n, 4), dtype=np.int32)
    cdef int[:, ::1] bbox = bbox_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] counts_arr = np.zeros(tiles_r * tiles_c + 1, dtype=np.int64)
    cdef long long[::1] counts = counts_arr
    cdef Py_ssize_t g
    cdef int r0, r1, c0, c1, tr, tc
    cdef double mc, mr, rad
    with nogil:
        for g in range(n):
            mc = mean[g, 0]
            mr = mean[g, 1]
            rad = radius[g]
            c0 = <int>ceil(mc - rad - 0.5)
            c1 = <int>floor(mc + rad - 0.5)
            r0 = <int>ceil(mr - rad - 0.5)
            r1 = <int>floor(mr + rad - 0.5)
            if c0 < 0:
                c0 = 0
            if r0 < 0:
                r0 = 0
            if c1 > n_cols - 1:
                c1 = n_cols - 1
            if r1 > n_rows - 1:
                r1 = n_rows - 1
            if c0 > c1 or r0 > r1:
                r0 = 1
                r1 = 0
            bbox[g, 0] = r0
            bbox[g, 1] = r1
            bbox[g, 2] = c0
            bbox[g, 3] = c1
            if r0 > r1:
                continue
            for tr in range(r0 // tile, r1 // tile + 1):
                for tc in range(c0 // tile, c1 // tile + 1):
                    counts[tr * tiles_c + tc + 1] += 1
        for g in range(tiles_r * tiles_c):
            counts[g + 1] += counts[g]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] fill_arr = counts_arr[:tiles_r * tiles_c].copy()
    cdef long long[::1] fill = fill_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] index_arr = np.empty(counts_arr[tiles_r * tiles_c], dtype=np.int64)
    cdef long long[::1] index = index_arr
    with nogil:
        for g in range(n):
            r0 = bbox[g, 0]
            r1 = bbox[g, 1]
            if r0 > r1:
                continue
            c0 = bbox[g, 2]
            c1 = bbox[g, 3]
            for tr in range(r0 // tile, r1 // tile + 1):
                for tc in range(c0 // tile, c1 // tile + 1):
                    index[fill[tr * tiles_c + tc]] = g
                    fill[tr * tiles_c + tc] += 1
    return bbox_arr, counts_arr, index_arr


def render_tiles(
    const double[:, ::1] mean,
    const double[:, ::1] conic,
    const double[::1] opacity,
    const floating[:, ::1] features,
    double cutoff2,
    const int[:, ::1] bbox,
    const long long[::1] offsets,
    const long long[::1] index,
    int tile,
    floating[:, :, ::1] out,
    floating[:, ::1] weight,
    int n_threads,
):
    """Accumulate every tile's Gaussians into its own output block."""
    cdef int n_rows = out.shape[1]
    cdef int n_cols = out.shape[2]
    cdef int n_ch = out.shape[0]
    cdef int tiles_c = (n_cols + tile - 1) // tile
    cdef int n_tiles = ((n_rows + tile - 1) // tile) * tiles_c
    cdef int t, tr0, tc0, r0, r1, c0, c1, rr, cc, ch
    cdef long long j
    cdef Py_ssize_t g
    cdef double dx, dy, m2, w, A, B, C, mc, mr, alpha
    for t in prange(n_tiles, nogil=True, schedule="dynamic", num_threads=n_threads):
        tr0 = (t // tiles_c) * tile
        tc0 = (t % tiles_c) * tile
        for j in range(offsets[t], offsets[t + 1]):
            g = index[j]
            r0 = bbox[g, 0]
            if r0 < tr0:
                r0 = tr0
            r1 = bbox[g, 1]
            if r1 > tr0 + tile - 1:
                r1 = tr0 + tile - 1
            c0 = bbox[g, 2]
            if c0 < tc0:
                c0 = tc0
            c1 = bbox[g, 3]
            if c1 > tc0 + tile - 1:
                c1 = tc0 + tile - 1
            mc = mean[g, 0]
            mr = mean[g, 1]
            A = conic[g, 0]
            B = conic[g, 1]
            C = conic[g, 2]
            alpha = opacity[g]
            for rr in range(r0, r1 + 1):
                dy = rr + 0.5 - mr
                for cc in range(c0, c1 + 1):
                    dx = cc + 0.5 - mc
                    m2 = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
                    if m2 > cutoff2:
                        continue
                    w = alpha * exp(-0.5 * m2)
                    weight[rr, cc] += <floating>w
                    for ch in range(n_ch):
                        out[ch, rr, cc] += <floating>(features[g, ch] * w)


def splat_backward(
    const double[:, ::1] mean,
    const double[:, ::1] conic,
    const double[::1] opacity,
    const floating[:, ::1] features,
    double cutoff2,
    const int[:, ::1] bbox,
    const double[:, :, ::1] d_out,
    int n_threads,
):
    """Gradients of ``sum(d_out * render)`` per Gaussian.

    Returns float64 arrays ``d_features (N, C)``, ``d_opacity (N,)``,
    ``d_mean (N, 2)`` and ``d_conic (N, 3)`` where ``d_conic`` holds the
    full-matrix cotangent entries ``(Q00, Q01, Q11)``; the off-diagonal value
    applies to each of the two symmetric entries.
    """
    cdef Py_ssize_t n = mean.shape[0]
    cdef int n_ch = features.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dF_arr = np.zeros((n, n_ch))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dA_arr = np.zeros(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dM_arr = np.zeros((n, 2))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dQ_arr = np.zeros((n, 3))
    cdef double[:, ::1] dF = dF_arr
    cdef double[::1] dA = dA_arr
    cdef double[:, ::1] dM = dM_arr
    cdef double[:, ::1] dQ = dQ_arr
    cdef Py_ssize_t g
    cdef int rr, cc, ch
    cdef double dx, dy, m2, e, gdot, A, B, C, mc, mr, alpha, s
    cdef double acc_a, acc_mx, acc_my, acc_q0, acc_q1, acc_q2
    for g in prange(n, nogil=True, schedule="dynamic", num_threads=n_threads):
        if bbox[g, 0] > bbox[g, 1]:
            continue
        mc = mean[g, 0]
        mr = mean[g, 1]
        A = conic[g, 0]
        B = conic[g, 1]
        C = conic[g, 2]
        alpha = opacity[g]
        acc_a = 0.0
        acc_mx = 0.0
        acc_my = 0.0
        acc_q0 = 0.0
        acc_q1 = 0.0
        acc_q2 = 0.0
        for rr in range(bbox[g, 0], bbox[g, 1] + 1):
            dy = rr + 0.5 - mr
            for cc in range(bbox[g, 2], bbox[g, 3] + 1):
                dx = cc + 0.5 - mc
                m2 = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
                if m2 > cutoff2:
                    continue
                e = exp(-0.5 * m2)
                gdot = 0.0
                for ch in range(n_ch):
                    gdot = gdot + d_out[ch, rr, cc] * features[g, ch]
                    dF[g, ch] += alpha * e * d_out[ch, rr, cc]
                acc_a = acc_a + e * gdot
                s = alpha * e * gdot
                # d kernel / d mean = kernel * Q d
                acc_mx = acc_mx + s * (A * dx + B * dy)
                acc_my = acc_my + s * (B * dx + C * dy)
                acc_q0 = acc_q0 - 0.5 * s * dx * dx
                acc_q1 = acc_q1 - 0.5 * s * dx * dy
                acc_q2 = acc_q2 - 0.5 * s * dy * dy
        dA[g] = acc_a
        dM[g, 0] = acc_mx
        dM[g, 1] = acc_my
        dQ[g, 0] = acc_q0
        dQ[g, 1] = acc_q1
        dQ[g, 2] = acc_q2
    return dF_arr, dA_arr, dM_arr, dQ_arr
