# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tile rasterization kernels (OpenMP over tiles).

Must stay semantically in lockstep with _kernels_py.py: same footprint
cutoff, alpha skip threshold, and transmittance floor. Each tile owns a
disjoint pixel block and a disjoint entry range, so the parallel loops are
race-free and the output is independent of the thread schedule.
"""
import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp

COMPILED = True

cdef double ALPHA_SKIP = 1.0 / 255.0
cdef double T_FLOOR = 1e-4
cdef double POWER_CUTOFF = -4.5


def rasterize_forward(long[::1] offsets,
                      double[:, ::1] e_mean, double[:, ::1] e_conic,
                      double[:, ::1] e_color, double[::1] e_opac,
                      double[::1] bg, int W, int H, int tile,
                      double[:, :, ::1] image, double[:, ::1] alpha_map,
                      double[:, ::1] t_final, int[:, ::1] n_contrib):
    cdef int ntx = (W + tile - 1) // tile
    cdef int n_tiles = offsets.shape[0] - 1
    cdef int tid, tx, ty, x0, y0, x1, y1, px, py, nc
    cdef long k, lo, hi
    cdef double dx, dy, a, b, c, power, g, al, T, test
    cdef double cr, cg, cb

    for tid in prange(n_tiles, nogil=True, schedule='dynamic', chunksize=4):
        ty = tid // ntx
        tx = tid - ty * ntx
        x0 = tx * tile
        y0 = ty * tile
        x1 = min(x0 + tile, W)
        y1 = min(y0 + tile, H)
        lo = offsets[tid]
        hi = offsets[tid + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                nc = 0
                for k in range(lo, hi):
                    dx = px - e_mean[k, 0]
                    dy = py - e_mean[k, 1]
                    a = e_conic[k, 0]
                    b = e_conic[k, 1]
                    c = e_conic[k, 2]
                    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                    if power > 0.0 or power < POWER_CUTOFF:
                        continue
                    g = exp(power)
                    al = g * e_opac[k]
                    if al < ALPHA_SKIP:
                        continue
                    test = T * (1.0 - al)
                    if test < T_FLOOR:
                        break
                    cr = cr + e_color[k, 0] * al * T
                    cg = cg + e_color[k, 1] * al * T
                    cb = cb + e_color[k, 2] * al * T
                    T = test
                    nc = <int> (k - lo) + 1
                image[py, px, 0] = cr + T * bg[0]
                image[py, px, 1] = cg + T * bg[1]
                image[py, px, 2] = cb + T * bg[2]
                alpha_map[py, px] = 1.0 - T
                t_final[py, px] = T
                n_contrib[py, px] = nc


def rasterize_backward(long[::1] offsets,
                       double[:, ::1] e_mean, double[:, ::1] e_conic,
                       double[:, ::1] e_color, double[::1] e_opac,
                       double[::1] bg, int W, int H, int tile,
                       double[:, ::1] t_final, int[:, ::1] n_contrib,
                       double[:, :, ::1] g_image, double[:, ::1] g_alpha,
                       double[:, ::1] partial):
    cdef int ntx = (W + tile - 1) // tile
    cdef int n_tiles = offsets.shape[0] - 1
    cdef int tid, tx, ty, x0, y0, x1, y1, px, py
    cdef long k, lo, hi, kk
    cdef double dx, dy, a, b, c, power, g, al, T, tf
    cdef double gl0, gl1, gl2, ga, bg_dot
    cdef double d_alpha, d_power, one_m
    cdef double accum0, accum1, accum2, last_al
    cdef double lastc0, lastc1, lastc2

    for tid in prange(n_tiles, nogil=True, schedule='dynamic', chunksize=4):
        ty = tid // ntx
        tx = tid - ty * ntx
        x0 = tx * tile
        y0 = ty * tile
        x1 = min(x0 + tile, W)
        y1 = min(y0 + tile, H)
        lo = offsets[tid]
        hi = offsets[tid + 1]
        if hi == lo:
            continue
        for py in range(y0, y1):
            for px in range(x0, x1):
                gl0 = g_image[py, px, 0]
                gl1 = g_image[py, px, 1]
                gl2 = g_image[py, px, 2]
                ga = g_alpha[py, px]
                tf = t_final[py, px]
                bg_dot = bg[0] * gl0 + bg[1] * gl1 + bg[2] * gl2
                T = tf
                accum0 = 0.0
                accum1 = 0.0
                accum2 = 0.0
                last_al = 0.0
                lastc0 = 0.0
                lastc1 = 0.0
                lastc2 = 0.0
                # Walk contributors back to front, peeling transmittance.
                for kk in range(n_contrib[py, px]):
                    k = lo + n_contrib[py, px] - 1 - kk
                    dx = px - e_mean[k, 0]
                    dy = py - e_mean[k, 1]
                    a = e_conic[k, 0]
                    b = e_conic[k, 1]
                    c = e_conic[k, 2]
                    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                    if power > 0.0 or power < POWER_CUTOFF:
                        continue
                    g = exp(power)
                    al = g * e_opac[k]
                    if al < ALPHA_SKIP:
                        continue
                    one_m = 1.0 - al
                    T = T / one_m
                    accum0 = last_al * lastc0 + (1.0 - last_al) * accum0
                    accum1 = last_al * lastc1 + (1.0 - last_al) * accum1
                    accum2 = last_al * lastc2 + (1.0 - last_al) * accum2
                    d_alpha = ((e_color[k, 0] - accum0) * gl0
                               + (e_color[k, 1] - accum1) * gl1
                               + (e_color[k, 2] - accum2) * gl2) * T
                    d_alpha = d_alpha + (ga - bg_dot) * (tf / one_m)
                    lastc0 = e_color[k, 0]
                    lastc1 = e_color[k, 1]
                    lastc2 = e_color[k, 2]
                    last_al = al

                    partial[k, 5] += al * T * gl0
                    partial[k, 6] += al * T * gl1
                    partial[k, 7] += al * T * gl2
                    partial[k, 8] += d_alpha * g

                    d_power = d_alpha * al
                    partial[k, 0] += d_power * (a * dx + b * dy)
                    partial[k, 1] += d_power * (b * dx + c * dy)
                    partial[k, 2] += d_power * (-0.5 * dx * dx)
                    partial[k, 3] += d_power * (-dx * dy)
                    partial[k, 4] += d_power * (-0.5 * dy * dy)
