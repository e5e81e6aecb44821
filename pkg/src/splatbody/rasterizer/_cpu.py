"""Pure-numpy compositing kernels, used when the compiled extension is
unavailable (or explicitly selected). Same semantics as the Cython kernels:
front-to-back alpha compositing per tile, contributions below 1/255 skipped,
accumulation stops once transmittance falls below 1e-4. Vectorized over the
pixels of a tile, sequential over contributors, so per-pixel results follow
the exact contributor order of the sorted tile lists.
"""

from __future__ import annotations

import numpy as np

from ._driver import TILE, TRANSMITTANCE_EPS, WEIGHT_CUTOFF


def _tile_pixels(t, n_tiles_x, height, width, dtype):
    ty, tx = divmod(t, n_tiles_x)
    y0, x0 = ty * TILE, tx * TILE
    ys = np.arange(y0, min(y0 + TILE, height))
    xs = np.arange(x0, min(x0 + TILE, width))
    px = np.tile(xs, len(ys)).astype(dtype) + dtype.type(0.5)
    py = np.repeat(ys, len(xs)).astype(dtype) + dtype.type(0.5)
    return ys, xs, px, py


def _weights(mean2d, conic, opac, gi, px, py, dtype):
    dx = px - mean2d[gi, 0]
    dy = py - mean2d[gi, 1]
    power = -0.5 * (
        conic[gi, 0] * dx * dx + 2.0 * conic[gi, 1] * dx * dy + conic[gi, 2] * dy * dy
    )
    inside = power <= 0.0
    w = opac[gi] * np.exp(np.where(inside, power, dtype.type(0.0)))
    return np.where(inside & (w >= dtype.type(WEIGHT_CUTOFF)), w, dtype.type(0.0)), dx, dy


def forward_tiles(
    mean2d, conic, opac, colors, entry_gauss, tile_start, n_tiles_x,
    height, width, background, out_rgb, out_alpha, threads,
):
    del threads  # the fallback is single-threaded; results do not depend on it
    dtype = np.dtype(mean2d.dtype)
    t_eps = dtype.type(TRANSMITTANCE_EPS)
    n_tiles = len(tile_start) - 1
    for t in range(n_tiles):
        ys, xs, px, py = _tile_pixels(t, n_tiles_x, height, width, dtype)
        n_pix = len(px)
        trans = np.ones(n_pix, dtype=dtype)
        rgb = np.zeros((n_pix, 3), dtype=dtype)
        for e in range(tile_start[t], tile_start[t + 1]):
            gi = entry_gauss[e]
            w, _, _ = _weights(mean2d, conic, opac, gi, px, py, dtype)
            w = np.where(trans >= t_eps, w, dtype.type(0.0))
            rgb += (w * trans)[:, None] * colors[gi]
            trans *= 1.0 - w
            if bool((trans < t_eps).all()):
                break
        rgb += trans[:, None] * background
        out_rgb[ys[0] : ys[-1] + 1, xs[0] : xs[-1] + 1] = rgb.reshape(len(ys), len(xs), 3)
        out_alpha[ys[0] : ys[-1] + 1, xs[0] : xs[-1] + 1] = (1.0 - trans).reshape(
            len(ys), len(xs)
        )


def backward_tiles(
    mean2d, conic, opac, colors, entry_gauss, tile_start, n_tiles_x,
    height, width, grad_rgb, grad_alpha, background,
    e_dmean2d, e_dconic, e_dopac, e_dcolor, threads,
):
    del threads
    dtype = np.dtype(mean2d.dtype)
    t_eps = dtype.type(TRANSMITTANCE_EPS)
    n_tiles = len(tile_start) - 1
    for t in range(n_tiles):
        start, end = tile_start[t], tile_start[t + 1]
        if end == start:
            continue
        ys, xs, px, py = _tile_pixels(t, n_tiles_x, height, width, dtype)
        n_pix = len(px)
        g_rgb = grad_rgb[ys[0] : ys[-1] + 1, xs[0] : xs[-1] + 1].reshape(n_pix, 3)
        g_alpha = grad_alpha[ys[0] : ys[-1] + 1, xs[0] : xs[-1] + 1].reshape(n_pix)

        # Replay the forward traversal, keeping each contributor's effective
        # weight and the transmittance it saw.
        trans = np.ones(n_pix, dtype=dtype)
        applied: list[tuple[int, np.ndarray, np.ndarray]] = []
        for e in range(start, end):
            gi = entry_gauss[e]
            w, _, _ = _weights(mean2d, conic, opac, gi, px, py, dtype)
            w = np.where(trans >= t_eps, w, dtype.type(0.0))
            applied.append((e, w, trans.copy()))
            trans = trans * (1.0 - w)
            if bool((trans < t_eps).all()):
                break

        # Reverse sweep: rec holds the composited color behind the current
        # contributor (background included), arec the suffix transmittance.
        rec = np.broadcast_to(background, (n_pix, 3)).astype(dtype).copy()
        arec = np.ones(n_pix, dtype=dtype)
        for e, w, t_before in reversed(applied):
            gi = entry_gauss[e]
            hit = w > 0.0
            w_t = w * t_before
            e_dcolor[e] += w_t @ g_rgb
            dw = (g_rgb * (colors[gi][None, :] - rec)).sum(axis=1) * t_before
            dw += g_alpha * t_before * arec
            dw = np.where(hit, dw, dtype.type(0.0))
            gauss = np.where(hit, w / opac[gi], dtype.type(0.0))
            e_dopac[e] += float((dw * gauss).sum())
            gpow = dw * w
            dx = px - mean2d[gi, 0]
            dy = py - mean2d[gi, 1]
            e_dmean2d[e, 0] += float((gpow * (conic[gi, 0] * dx + conic[gi, 1] * dy)).sum())
            e_dmean2d[e, 1] += float((gpow * (conic[gi, 1] * dx + conic[gi, 2] * dy)).sum())
            e_dconic[e, 0] += float((-0.5 * gpow * dx * dx).sum())
            e_dconic[e, 1] += float((-gpow * dx * dy).sum())
            e_dconic[e, 2] += float((-0.5 * gpow * dy * dy).sum())
            rec = np.where(hit[:, None], w[:, None] * colors[gi] + (1.0 - w)[:, None] * rec, rec)
            arec = np.where(hit, (1.0 - w) * arec, arec)
