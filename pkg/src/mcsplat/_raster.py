"""Numba kernels for front-to-back compositing and its reverse pass.

Gaussians arrive already depth-sorted. Per pixel, a Gaussian is visited only
if the pixel lies inside its footprint box (half extents ``rx``, ``ry``) and
its alpha reaches ``alpha_skip``. Alpha is clamped at ``alpha_clamp`` and the
walk stops right after transmittance drops below ``t_min``.

Pixel (col, row) sits at coordinate (col, row).
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

TILE = 16


@njit(cache=True)
def bin_tiles(means, rx, ry, width, height, tile):
    """Tile lists in input (depth) order; returns CSR offsets and Gaussian ids."""
    n = means.shape[0]
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    span = np.full((n, 4), -1, dtype=np.int64)
    counts = np.zeros(n_tiles, dtype=np.int64)
    for g in range(n):
        xmin = means[g, 0] - rx[g]
        xmax = means[g, 0] + rx[g]
        ymin = means[g, 1] - ry[g]
        ymax = means[g, 1] + ry[g]
        if xmax < 0.0 or ymax < 0.0 or xmin > width - 1 or ymin > height - 1:
            continue
        c0 = max(int(np.ceil(xmin)), 0)
        c1 = min(int(np.floor(xmax)), width - 1)
        r0 = max(int(np.ceil(ymin)), 0)
        r1 = min(int(np.floor(ymax)), height - 1)
        if c1 < c0 or r1 < r0:
            continue
        span[g, 0] = c0 // tile
        span[g, 1] = c1 // tile
        span[g, 2] = r0 // tile
        span[g, 3] = r1 // tile
        for ty in range(span[g, 2], span[g, 3] + 1):
            for tx in range(span[g, 0], span[g, 1] + 1):
                counts[ty * tiles_x + tx] += 1
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    for t in range(n_tiles):
        offsets[t + 1] = offsets[t] + counts[t]
    ids = np.empty(offsets[n_tiles], dtype=np.int64)
    fill = offsets[:-1].copy()
    for g in range(n):
        if span[g, 0] < 0:
            continue
        for ty in range(span[g, 2], span[g, 3] + 1):
            for tx in range(span[g, 0], span[g, 1] + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = g
                fill[t] += 1
    return offsets, ids


@njit(cache=True, inline="always")
def _alpha(g, px, py, means, conics, opac, rx, ry, alpha_clamp, alpha_skip):
    """Returns (alpha, gauss, dx, dy, clamped); alpha < 0 means skip."""
    dx = px - means[g, 0]
    dy = py - means[g, 1]
    if abs(dx) > rx[g] or abs(dy) > ry[g]:
        return -1.0, 0.0, dx, dy, False
    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
    gauss = np.exp(power)
    alpha = opac[g] * gauss
    clamped = False
    if alpha > alpha_clamp:
        alpha = alpha_clamp
        clamped = True
    if alpha < alpha_skip:
        return -1.0, gauss, dx, dy, False
    return alpha, gauss, dx, dy, clamped


@njit(cache=True, inline="always")
def _pixel_forward(px, py, ids, start, stop, means, conics, opac, colors, rx, ry,
                   alpha_clamp, alpha_skip, t_min):
    T = 1.0
    r = 0.0
    gr = 0.0
    b = 0.0
    n_contrib = 0
    last = stop
    for pos in range(start, stop):
        g = ids[pos]
        alpha, _, _, _, _ = _alpha(g, px, py, means, conics, opac, rx, ry, alpha_clamp, alpha_skip)
        if alpha < 0.0:
            continue
        w = alpha * T
        r += colors[g, 0] * w
        gr += colors[g, 1] * w
        b += colors[g, 2] * w
        T = T * (1.0 - alpha)
        n_contrib += 1
        if T < t_min:
            last = pos + 1
            break
    return r, gr, b, T, n_contrib, last


@njit(cache=True, parallel=True)
def forward_tiled(offsets, ids, means, conics, opac, colors, rx, ry, width, height, tile,
                  alpha_clamp, alpha_skip, t_min):
    image = np.zeros((height, width, 3))
    T_final = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    last = np.zeros((height, width), dtype=np.int64)
    tiles_x = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        stop = offsets[t + 1]
        for row in range(ty * tile, min((ty + 1) * tile, height)):
            for col in range(tx * tile, min((tx + 1) * tile, width)):
                r, gr, b, T, nc, ls = _pixel_forward(
                    float(col), float(row), ids, start, stop, means, conics, opac, colors,
                    rx, ry, alpha_clamp, alpha_skip, t_min)
                image[row, col, 0] = r
                image[row, col, 1] = gr
                image[row, col, 2] = b
                T_final[row, col] = T
                n_contrib[row, col] = nc
                last[row, col] = ls
    return image, T_final, n_contrib, last


@njit(cache=True)
def forward_sequential(means, conics, opac, colors, rx, ry, width, height,
                       alpha_clamp, alpha_skip, t_min):
    """Untiled reference: every pixel walks the full sorted list."""
    n = means.shape[0]
    ids = np.arange(n)
    image = np.zeros((height, width, 3))
    T_final = np.ones((height, width))
    for row in range(height):
        for col in range(width):
            r, gr, b, T, _, _ = _pixel_forward(
                float(col), float(row), ids, 0, n, means, conics, opac, colors,
                rx, ry, alpha_clamp, alpha_skip, t_min)
            image[row, col, 0] = r
            image[row, col, 1] = gr
            image[row, col, 2] = b
            T_final[row, col] = T
    return image, T_final


@njit(cache=True, parallel=True)
def backward_tiled(offsets, ids, last, grad_image, means, conics, opac, colors, rx, ry,
                   width, height, tile, alpha_clamp, alpha_skip):
    """Per-Gaussian gradients w.r.t. 2D mean (2), conic entries (3), opacity, color (3).

    Conic gradients are returned as entries of the symmetric-matrix gradient
    (d/dQ00, d/dQ01, d/dQ11). Per-(tile, Gaussian) partial sums are reduced in
    tile order so the result is independent of thread scheduling.
    """
    n = means.shape[0]
    n_pairs = ids.shape[0]
    pair_grads = np.zeros((n_pairs, 9))
    tiles_x = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        stop = offsets[t + 1]
        size = stop - start
        s_pos = np.empty(size, dtype=np.int64)
        s_alpha = np.empty(size)
        s_T = np.empty(size)
        s_gauss = np.empty(size)
        s_dx = np.empty(size)
        s_dy = np.empty(size)
        s_clamped = np.empty(size, dtype=np.bool_)
        for row in range(ty * tile, min((ty + 1) * tile, height)):
            for col in range(tx * tile, min((tx + 1) * tile, width)):
                g0 = grad_image[row, col, 0]
                g1 = grad_image[row, col, 1]
                g2 = grad_image[row, col, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                px = float(col)
                py = float(row)
                # replay the forward walk
                m = 0
                T = 1.0
                for pos in range(start, last[row, col]):
                    g = ids[pos]
                    alpha, gauss, dx, dy, clamped = _alpha(
                        g, px, py, means, conics, opac, rx, ry, alpha_clamp, alpha_skip)
                    if alpha < 0.0:
                        continue
                    s_pos[m] = pos
                    s_alpha[m] = alpha
                    s_T[m] = T
                    s_gauss[m] = gauss
                    s_dx[m] = dx
                    s_dy[m] = dy
                    s_clamped[m] = clamped
                    m += 1
                    T = T * (1.0 - alpha)
                # reverse sweep; acc holds sum over later Gaussians of c * alpha * T
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                for j in range(m - 1, -1, -1):
                    pos = s_pos[j]
                    g = ids[pos]
                    alpha = s_alpha[j]
                    Tj = s_T[j]
                    w = alpha * Tj
                    pg = pair_grads[pos]
                    pg[6] += g0 * w
                    pg[7] += g1 * w
                    pg[8] += g2 * w
                    inv = 1.0 / (1.0 - alpha)
                    dL_dalpha = (g0 * (colors[g, 0] * Tj - acc0 * inv)
                                 + g1 * (colors[g, 1] * Tj - acc1 * inv)
                                 + g2 * (colors[g, 2] * Tj - acc2 * inv))
                    acc0 += colors[g, 0] * w
                    acc1 += colors[g, 1] * w
                    acc2 += colors[g, 2] * w
                    if s_clamped[j]:
                        continue
                    pg[5] += dL_dalpha * s_gauss[j]
                    dL_dpower = dL_dalpha * alpha
                    dx = s_dx[j]
                    dy = s_dy[j]
                    pg[0] += dL_dpower * (conics[g, 0] * dx + conics[g, 1] * dy)
                    pg[1] += dL_dpower * (conics[g, 1] * dx + conics[g, 2] * dy)
                    pg[2] += dL_dpower * (-0.5 * dx * dx)
                    pg[3] += dL_dpower * (-0.5 * dx * dy)
                    pg[4] += dL_dpower * (-0.5 * dy * dy)
    grads = np.zeros((n, 9))
    for p in range(n_pairs):
        g = ids[p]
        for k in range(9):
            grads[g, k] += pair_grads[p, k]
    return grads
