# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tile-compositing kernels (forward + analytic backward).

Tiles are 16x16 pixels and are processed independently: one OpenMP thread
owns a tile end to end, and every per-pixel traversal follows the sorted
contributor list sequentially, so images and per-entry gradient buffers are
bit-identical for any thread count. Contributor data is gathered into
tile-local arrays once per tile, and exp() is only evaluated where the
Gaussian can clear the 1/255 weight cutoff (power >= ln(1/255); opacities
never exceed 1, so the pre-test cannot change results).
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, expf, log
from libc.stdlib cimport free, malloc

ctypedef fused real_t:
    float
    double

cdef int TILE = 16
cdef double T_EPS = 1e-4
cdef double CUTOFF = 1.0 / 255.0
cdef double POWER_MIN = -5.5412635451584258  # ln(1/255)


cdef inline real_t _exp(real_t x) noexcept nogil:
    if real_t is float:
        return expf(x)
    else:
        return exp(x)


cdef void _forward_tile(
    Py_ssize_t t,
    real_t[:, ::1] mean2d, real_t[:, ::1] conic, real_t[::1] opac, real_t[:, ::1] colors,
    cnp.int32_t[::1] entry_gauss, cnp.int64_t[::1] tile_start,
    int n_tiles_x, int height, int width, real_t[::1] background,
    real_t[:, :, ::1] out_rgb, real_t[:, ::1] out_alpha,
) noexcept nogil:
    cdef Py_ssize_t start = tile_start[t]
    cdef Py_ssize_t end = tile_start[t + 1]
    cdef Py_ssize_t n_e = end - start
    cdef int x0 = (<int>(t % n_tiles_x)) * TILE
    cdef int y0 = (<int>(t // n_tiles_x)) * TILE
    cdef int x1 = min(x0 + TILE, width)
    cdef int y1 = min(y0 + TILE, height)
    cdef int px, py
    cdef Py_ssize_t e, gi, k
    cdef real_t cx, cy, dx, dy, power, w, wt, trans, r, g, b
    cdef real_t t_eps = <real_t>T_EPS
    cdef real_t cutoff = <real_t>CUTOFF
    cdef real_t p_min = <real_t>POWER_MIN
    cdef real_t bg0 = background[0]
    cdef real_t bg1 = background[1]
    cdef real_t bg2 = background[2]
    cdef real_t* buf = NULL

    if n_e > 0:
        buf = <real_t*>malloc(n_e * 9 * sizeof(real_t))
        if buf == NULL:
            return
        for k in range(n_e):
            gi = entry_gauss[start + k]
            buf[9 * k + 0] = mean2d[gi, 0]
            buf[9 * k + 1] = mean2d[gi, 1]
            buf[9 * k + 2] = conic[gi, 0]
            buf[9 * k + 3] = conic[gi, 1]
            buf[9 * k + 4] = conic[gi, 2]
            buf[9 * k + 5] = opac[gi]
            buf[9 * k + 6] = colors[gi, 0]
            buf[9 * k + 7] = colors[gi, 1]
            buf[9 * k + 8] = colors[gi, 2]

    for py in range(y0, y1):
        cy = <real_t>py + <real_t>0.5
        for px in range(x0, x1):
            cx = <real_t>px + <real_t>0.5
            trans = <real_t>1.0
            r = <real_t>0.0
            g = <real_t>0.0
            b = <real_t>0.0
            for k in range(n_e):
                dx = cx - buf[9 * k + 0]
                dy = cy - buf[9 * k + 1]
                power = <real_t>-0.5 * (
                    buf[9 * k + 2] * dx * dx
                    + <real_t>2.0 * buf[9 * k + 3] * dx * dy
                    + buf[9 * k + 4] * dy * dy
                )
                if power > <real_t>0.0 or power < p_min:
                    continue
                w = buf[9 * k + 5] * _exp(power)
                if w < cutoff:
                    continue
                wt = w * trans
                r = r + wt * buf[9 * k + 6]
                g = g + wt * buf[9 * k + 7]
                b = b + wt * buf[9 * k + 8]
                trans = trans * (<real_t>1.0 - w)
                if trans < t_eps:
                    break
            out_rgb[py, px, 0] = r + trans * bg0
            out_rgb[py, px, 1] = g + trans * bg1
            out_rgb[py, px, 2] = b + trans * bg2
            out_alpha[py, px] = <real_t>1.0 - trans

    if buf != NULL:
        free(buf)


def forward_tiles(
    real_t[:, ::1] mean2d, real_t[:, ::1] conic, real_t[::1] opac, real_t[:, ::1] colors,
    cnp.int32_t[::1] entry_gauss, cnp.int64_t[::1] tile_start, int n_tiles_x,
    int height, int width, real_t[::1] background,
    real_t[:, :, ::1] out_rgb, real_t[:, ::1] out_alpha, int threads,
):
    cdef Py_ssize_t n_tiles = tile_start.shape[0] - 1
    cdef Py_ssize_t t
    if threads <= 1:
        with nogil:
            for t in range(n_tiles):
                _forward_tile(t, mean2d, conic, opac, colors, entry_gauss, tile_start,
                              n_tiles_x, height, width, background, out_rgb, out_alpha)
    else:
        for t in prange(n_tiles, nogil=True, num_threads=threads, schedule="static"):
            _forward_tile(t, mean2d, conic, opac, colors, entry_gauss, tile_start,
                          n_tiles_x, height, width, background, out_rgb, out_alpha)


cdef void _backward_tile(
    Py_ssize_t t,
    real_t[:, ::1] mean2d, real_t[:, ::1] conic, real_t[::1] opac, real_t[:, ::1] colors,
    cnp.int32_t[::1] entry_gauss, cnp.int64_t[::1] tile_start,
    int n_tiles_x, int height, int width,
    real_t[:, :, ::1] grad_rgb, real_t[:, ::1] grad_alpha, real_t[::1] background,
    real_t[:, ::1] e_dmean2d, real_t[:, ::1] e_dconic, real_t[::1] e_dopac,
    real_t[:, ::1] e_dcolor,
) noexcept nogil:
    cdef Py_ssize_t start = tile_start[t]
    cdef Py_ssize_t end = tile_start[t + 1]
    cdef Py_ssize_t n_e = end - start
    if n_e == 0:
        return
    cdef int x0 = (<int>(t % n_tiles_x)) * TILE
    cdef int y0 = (<int>(t // n_tiles_x)) * TILE
    cdef int x1 = min(x0 + TILE, width)
    cdef int y1 = min(y0 + TILE, height)
    cdef int px, py
    cdef Py_ssize_t e, gi, k, n_app, kk
    cdef real_t cx, cy, dx, dy, power, w, trans, tk
    cdef real_t rec_r, rec_g, rec_b, arec, dw, gw, gpow
    cdef real_t gr0, gr1, gr2, gal
    cdef real_t t_eps = <real_t>T_EPS
    cdef real_t cutoff = <real_t>CUTOFF
    cdef real_t p_min = <real_t>POWER_MIN

    # Tile-local contributor data plus accumulation slots (written back once),
    # and per-pixel replay scratch.
    cdef real_t* buf = <real_t*>malloc(n_e * 18 * sizeof(real_t))
    cdef Py_ssize_t* app = <Py_ssize_t*>malloc(n_e * sizeof(Py_ssize_t))
    cdef real_t* w_s = <real_t*>malloc(n_e * sizeof(real_t))
    cdef real_t* t_s = <real_t*>malloc(n_e * sizeof(real_t))
    if buf == NULL or app == NULL or w_s == NULL or t_s == NULL:
        if buf != NULL: free(buf)
        if app != NULL: free(app)
        if w_s != NULL: free(w_s)
        if t_s != NULL: free(t_s)
        return

    for k in range(n_e):
        gi = entry_gauss[start + k]
        buf[18 * k + 0] = mean2d[gi, 0]
        buf[18 * k + 1] = mean2d[gi, 1]
        buf[18 * k + 2] = conic[gi, 0]
        buf[18 * k + 3] = conic[gi, 1]
        buf[18 * k + 4] = conic[gi, 2]
        buf[18 * k + 5] = opac[gi]
        buf[18 * k + 6] = colors[gi, 0]
        buf[18 * k + 7] = colors[gi, 1]
        buf[18 * k + 8] = colors[gi, 2]
        for kk in range(9, 18):
            buf[18 * k + kk] = <real_t>0.0

    for py in range(y0, y1):
        cy = <real_t>py + <real_t>0.5
        for px in range(x0, x1):
            cx = <real_t>px + <real_t>0.5
            # Pass 1: replicate the forward decisions exactly.
            n_app = 0
            trans = <real_t>1.0
            for k in range(n_e):
                dx = cx - buf[18 * k + 0]
                dy = cy - buf[18 * k + 1]
                power = <real_t>-0.5 * (
                    buf[18 * k + 2] * dx * dx
                    + <real_t>2.0 * buf[18 * k + 3] * dx * dy
                    + buf[18 * k + 4] * dy * dy
                )
                if power > <real_t>0.0 or power < p_min:
                    continue
                w = buf[18 * k + 5] * _exp(power)
                if w < cutoff:
                    continue
                app[n_app] = k
                w_s[n_app] = w
                t_s[n_app] = trans
                n_app = n_app + 1
                trans = trans * (<real_t>1.0 - w)
                if trans < t_eps:
                    break
            if n_app == 0:
                continue
            # Pass 2: back-to-front adjoint. rec carries the composited color
            # behind the current contributor (background included); arec the
            # suffix transmittance product.
            gr0 = grad_rgb[py, px, 0]
            gr1 = grad_rgb[py, px, 1]
            gr2 = grad_rgb[py, px, 2]
            gal = grad_alpha[py, px]
            rec_r = background[0]
            rec_g = background[1]
            rec_b = background[2]
            arec = <real_t>1.0
            for kk in range(n_app - 1, -1, -1):
                k = app[kk]
                w = w_s[kk]
                tk = t_s[kk]
                dw = (
                    gr0 * tk * (buf[18 * k + 6] - rec_r)
                    + gr1 * tk * (buf[18 * k + 7] - rec_g)
                    + gr2 * tk * (buf[18 * k + 8] - rec_b)
                    + gal * tk * arec
                )
                gw = w / buf[18 * k + 5]
                gpow = dw * w
                dx = cx - buf[18 * k + 0]
                dy = cy - buf[18 * k + 1]
                buf[18 * k + 9] += w * tk * gr0
                buf[18 * k + 10] += w * tk * gr1
                buf[18 * k + 11] += w * tk * gr2
                buf[18 * k + 12] += dw * gw
                buf[18 * k + 13] += gpow * (buf[18 * k + 2] * dx + buf[18 * k + 3] * dy)
                buf[18 * k + 14] += gpow * (buf[18 * k + 3] * dx + buf[18 * k + 4] * dy)
                buf[18 * k + 15] += <real_t>-0.5 * gpow * dx * dx
                buf[18 * k + 16] += -gpow * dx * dy
                buf[18 * k + 17] += <real_t>-0.5 * gpow * dy * dy
                rec_r = w * buf[18 * k + 6] + (<real_t>1.0 - w) * rec_r
                rec_g = w * buf[18 * k + 7] + (<real_t>1.0 - w) * rec_g
                rec_b = w * buf[18 * k + 8] + (<real_t>1.0 - w) * rec_b
                arec = (<real_t>1.0 - w) * arec

    for k in range(n_e):
        e = start + k
        e_dcolor[e, 0] = buf[18 * k + 9]
        e_dcolor[e, 1] = buf[18 * k + 10]
        e_dcolor[e, 2] = buf[18 * k + 11]
        e_dopac[e] = buf[18 * k + 12]
        e_dmean2d[e, 0] = buf[18 * k + 13]
        e_dmean2d[e, 1] = buf[18 * k + 14]
        e_dconic[e, 0] = buf[18 * k + 15]
        e_dconic[e, 1] = buf[18 * k + 16]
        e_dconic[e, 2] = buf[18 * k + 17]

    free(buf)
    free(app)
    free(w_s)
    free(t_s)


def backward_tiles(
    real_t[:, ::1] mean2d, real_t[:, ::1] conic, real_t[::1] opac, real_t[:, ::1] colors,
    cnp.int32_t[::1] entry_gauss, cnp.int64_t[::1] tile_start, int n_tiles_x,
    int height, int width,
    real_t[:, :, ::1] grad_rgb, real_t[:, ::1] grad_alpha, real_t[::1] background,
    real_t[:, ::1] e_dmean2d, real_t[:, ::1] e_dconic, real_t[::1] e_dopac,
    real_t[:, ::1] e_dcolor, int threads,
):
    cdef Py_ssize_t n_tiles = tile_start.shape[0] - 1
    cdef Py_ssize_t t
    if threads <= 1:
        with nogil:
            for t in range(n_tiles):
                _backward_tile(t, mean2d, conic, opac, colors, entry_gauss, tile_start,
                               n_tiles_x, height, width, grad_rgb, grad_alpha, background,
                               e_dmean2d, e_dconic, e_dopac, e_dcolor)
    else:
        for t in prange(n_tiles, nogil=True, num_threads=threads, schedule="static"):
            _backward_tile(t, mean2d, conic, opac, colors, entry_gauss, tile_start,
                           n_tiles_x, height, width, grad_rgb, grad_alpha, background,
                           e_dmean2d, e_dconic, e_dopac, e_dcolor)
