"""Pure-numpy tile rasterization kernels (fallback for the compiled extension).

Semantics are kept in lockstep with _kernels.pyx: same footprint cutoff,
alpha skip threshold, and transmittance floor, so both backends produce
identical images up to floating-point associativity (which is also matched:
per-pixel compositing is a plain left-to-right product/sum in both).
"""
from __future__ import annotations

import numpy as np

COMPILED = False

ALPHA_SKIP = 1.0 / 255.0
T_FLOOR = 1e-4
POWER_CUTOFF = -4.5  # 3-sigma ellipse footprint


def _tile_pixels(tile_id, ntx, tile, W, H):
    ty, tx = divmod(tile_id, ntx)
    x0, y0 = tx * tile, ty * tile
    xs = np.arange(x0, min(x0 + tile, W), dtype=np.float64)
    ys = np.arange(y0, min(y0 + tile, H), dtype=np.float64)
    px = np.repeat(ys, len(xs)), np.tile(xs, len(ys))  # (row, col) flattened
    return x0, y0, px[1], px[0], len(xs), len(ys)


def _alpha_matrix(e_mean, e_conic, e_opac, pxs, pys):
    """Per (pixel, entry) alpha with footprint and skip rules applied."""
    dx = pxs[:, None] - e_mean[None, :, 0]
    dy = pys[:, None] - e_mean[None, :, 1]
    a, b, c = e_conic[:, 0], e_conic[:, 1], e_conic[:, 2]
    power = -0.5 * (a * dx**2 + c * dy**2) - b * dx * dy
    valid = (power <= 0.0) & (power >= POWER_CUTOFF)
    g = np.where(valid, np.exp(np.minimum(power, 0.0)), 0.0)
    alpha = g * e_opac[None, :]
    alpha[alpha < ALPHA_SKIP] = 0.0
    g[alpha == 0.0] = 0.0
    return alpha, g, dx, dy


def _composite(alpha):
    """Exclusive transmittance per entry plus the floor-termination mask."""
    one_m = 1.0 - alpha
    t_inc = np.cumprod(one_m, axis=1)
    keep = t_inc >= T_FLOOR  # transmittance floor: first failure ends the walk
    alpha_eff = np.where(keep, alpha, 0.0)
    t_exc = np.empty_like(t_inc)
    t_exc[:, 0] = 1.0
    if alpha.shape[1] > 1:
        t_exc[:, 1:] = np.cumprod(1.0 - alpha_eff[:, :-1], axis=1)
    t_final = t_exc[:, -1] * (1.0 - alpha_eff[:, -1])
    return alpha_eff, t_exc, t_final


def rasterize_forward(offsets, e_mean, e_conic, e_color, e_opac, bg, W, H, tile, image, alpha_map, t_final, n_contrib):
    ntx = (W + tile - 1) // tile
    n_tiles = len(offsets) - 1
    for tid in range(n_tiles):
        lo, hi = offsets[tid], offsets[tid + 1]
        x0, y0, pxs, pys, tw, th = _tile_pixels(tid, ntx, tile, W, H)
        if hi == lo:
            image[y0 : y0 + th, x0 : x0 + tw] = bg
            alpha_map[y0 : y0 + th, x0 : x0 + tw] = 0.0
            t_final[y0 : y0 + th, x0 : x0 + tw] = 1.0
            n_contrib[y0 : y0 + th, x0 : x0 + tw] = 0
            continue
        al, _, _, _ = _alpha_matrix(e_mean[lo:hi], e_conic[lo:hi], e_opac[lo:hi], pxs, pys)
        al_eff, t_exc, tf = _composite(al)
        w = al_eff * t_exc
        col = w @ e_color[lo:hi] + tf[:, None] * bg[None, :]
        contrib = al_eff > 0.0
        nc = np.where(
            contrib.any(axis=1),
            al.shape[1] - np.argmax(contrib[:, ::-1], axis=1),
            0,
        )
        image[y0 : y0 + th, x0 : x0 + tw] = col.reshape(th, tw, 3)
        alpha_map[y0 : y0 + th, x0 : x0 + tw] = (1.0 - tf).reshape(th, tw)
        t_final[y0 : y0 + th, x0 : x0 + tw] = tf.reshape(th, tw)
        n_contrib[y0 : y0 + th, x0 : x0 + tw] = nc.reshape(th, tw).astype(np.int32)


def rasterize_backward(offsets, e_mean, e_conic, e_color, e_opac, bg, W, H, tile, t_final, n_contrib, g_image, g_alpha, partial):
    ntx = (W + tile - 1) // tile
    n_tiles = len(offsets) - 1
    for tid in range(n_tiles):
        lo, hi = offsets[tid], offsets[tid + 1]
        if hi == lo:
            continue
        x0, y0, pxs, pys, tw, th = _tile_pixels(tid, ntx, tile, W, H)
        gl = g_image[y0 : y0 + th, x0 : x0 + tw].reshape(-1, 3)
        ga = g_alpha[y0 : y0 + th, x0 : x0 + tw].reshape(-1)
        tf = t_final[y0 : y0 + th, x0 : x0 + tw].reshape(-1)

        al, g, dx, dy = _alpha_matrix(e_mean[lo:hi], e_conic[lo:hi], e_opac[lo:hi], pxs, pys)
        al_eff, t_exc, _ = _composite(al)
        contrib = al_eff > 0.0

        # Suffix composite color behind each entry: S_k = sum_{j>k} c_j a_j T_j.
        w = al_eff * t_exc  # (P, K)
        cw = w[:, :, None] * e_color[None, lo:hi, :]
        S = np.flip(np.cumsum(np.flip(cw, axis=1), axis=1), axis=1) - cw

        one_m = np.where(contrib, 1.0 - al_eff, 1.0)
        d_alpha = np.einsum("pc,pkc->pk", gl, e_color[None, lo:hi, :] * t_exc[:, :, None] - S / one_m[:, :, None])
        d_alpha += (ga - gl @ bg)[:, None] * (tf[:, None] / one_m)
        d_alpha = np.where(contrib, d_alpha, 0.0)

        d_power = d_alpha * al_eff
        a, b, c = e_conic[lo:hi, 0], e_conic[lo:hi, 1], e_conic[lo:hi, 2]
        p = partial[lo:hi]
        p[:, 0] = np.sum(d_power * (a * dx + b * dy), axis=0)
        p[:, 1] = np.sum(d_power * (b * dx + c * dy), axis=0)
        p[:, 2] = np.sum(d_power * (-0.5 * dx**2), axis=0)
        p[:, 3] = np.sum(d_power * (-dx * dy), axis=0)
        p[:, 4] = np.sum(d_power * (-0.5 * dy**2), axis=0)
        p[:, 5:8] = w.T @ gl
        p[:, 8] = np.sum(d_alpha * g, axis=0)
