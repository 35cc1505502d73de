"""Numba kernels for front-to-back feature compositing and its adjoint.

Both kernels walk, per pixel, a depth-sorted list of Gaussian indices owned by
the pixel's tile. Contributions with ``alpha < 1/255`` are skipped and a pixel
stops after the contribution that drops its transmittance below ``1e-4``.
The backward pass replays the forward walk, so no per-pixel lists are stored.
"""

import math
import warnings

import numpy as np
from numba import njit, prange

# old system TBB builds make numba warn once at first parallel launch; the workqueue layer is fine
warnings.filterwarnings("ignore", message="The TBB threading layer")

ALPHA_FLOOR = 1.0 / 255.0
T_STOP = 1e-4


@njit(parallel=True, cache=True)
def composite_forward(mean2d, conic, opacity, feats, entries, tile_start,
                      tiles_x, tile_w, tile_h, width, height):
    n_tiles = tile_start.shape[0] - 1
    C = feats.shape[1]
    out = np.zeros((height, width, C), dtype=feats.dtype)
    trans = np.ones((height, width), dtype=feats.dtype)
    for t in prange(n_tiles):
        x0 = (t % tiles_x) * tile_w
        y0 = (t // tiles_x) * tile_h
        lo = tile_start[t]
        hi = tile_start[t + 1]
        for py in range(y0, min(y0 + tile_h, height)):
            for px in range(x0, min(x0 + tile_w, width)):
                T = 1.0
                for e in range(lo, hi):
                    g = entries[e]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    a = opacity[g] * math.exp(power)
                    if a < ALPHA_FLOOR:
                        continue
                    w = a * T
                    for c in range(C):
                        out[py, px, c] += w * feats[g, c]
                    T = T * (1.0 - a)
                    if T < T_STOP:
                        break
                trans[py, px] = T
    return out, trans


@njit(parallel=True, cache=True)
def composite_backward(mean2d, conic, opacity, feats, entries, tile_start,
                       tiles_x, tile_w, tile_h, width, height,
                       out, trans, grad_out, grad_alpha):
    n_tiles = tile_start.shape[0] - 1
    C = feats.shape[1]
    E = entries.shape[0]
    g_mean = np.zeros((E, 2), dtype=feats.dtype)
    g_conic = np.zeros((E, 3), dtype=feats.dtype)
    g_opac = np.zeros(E, dtype=feats.dtype)
    g_feat = np.zeros((E, C), dtype=feats.dtype)
    for t in prange(n_tiles):
        x0 = (t % tiles_x) * tile_w
        y0 = (t // tiles_x) * tile_h
        lo = tile_start[t]
        hi = tile_start[t + 1]
        prefix = np.zeros(C, dtype=feats.dtype)
        for py in range(y0, min(y0 + tile_h, height)):
            for px in range(x0, min(x0 + tile_w, width)):
                for c in range(C):
                    prefix[c] = 0.0
                T = 1.0
                T_final = trans[py, px]
                d_alpha_pix = grad_alpha[py, px]
                for e in range(lo, hi):
                    g = entries[e]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    A = conic[g, 0]
                    B = conic[g, 1]
                    Cc = conic[g, 2]
                    power = -0.5 * (A * dx * dx + Cc * dy * dy) - B * dx * dy
                    G = math.exp(power)
                    a = opacity[g] * G
                    if a < ALPHA_FLOOR:
                        continue
                    w = a * T
                    one_minus = 1.0 - a
                    d_a = 0.0
                    for c in range(C):
                        fc = feats[g, c]
                        prefix[c] += w * fc
                        go = grad_out[py, px, c]
                        g_feat[e, c] += w * go
                        behind = out[py, px, c] - prefix[c]
                        d_a += go * (fc * T - behind / one_minus)
                    d_a += d_alpha_pix * T_final / one_minus
                    g_opac[e] += d_a * G
                    dG = d_a * opacity[g] * G
                    g_mean[e, 0] += dG * (A * dx + B * dy)
                    g_mean[e, 1] += dG * (Cc * dy + B * dx)
                    g_conic[e, 0] += -0.5 * dG * dx * dx
                    g_conic[e, 1] += -dG * dx * dy
                    g_conic[e, 2] += -0.5 * dG * dy * dy
                    T = T * one_minus
                    if T < T_STOP:
                        break
    return g_mean, g_conic, g_opac, g_feat


@njit(cache=True)
def reduce_entries(entries, n, g_mean, g_conic, g_opac, g_feat):
    """Sum per-entry gradients into per-Gaussian gradients in entry order."""
    C = g_feat.shape[1]
    m = np.zeros((n, 2), dtype=g_mean.dtype)
    k = np.zeros((n, 3), dtype=g_mean.dtype)
    o = np.zeros(n, dtype=g_mean.dtype)
    f = np.zeros((n, C), dtype=g_mean.dtype)
    for e in range(entries.shape[0]):
        g = entries[e]
        m[g, 0] += g_mean[e, 0]
        m[g, 1] += g_mean[e, 1]
        for j in range(3):
            k[g, j] += g_conic[e, j]
        o[g] += g_opac[e]
        for c in range(C):
            f[g, c] += g_feat[e, c]
    return m, k, o, f
