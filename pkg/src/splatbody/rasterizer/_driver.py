"""Backend-independent rasterizer plumbing.

Owns everything outside the per-pixel hot loop: perspective (EWA) projection
of 3D Gaussians to screen-space ellipses, tile binning with depth-sorted
contributor lists, and the analytic chain that turns accumulated screen-space
gradients back into gradients on 3D means/covariances. The per-tile
compositing loops live in the selected kernel backend.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..camera import Camera

TILE = 16
LOW_PASS = 0.3            # pixel^2, added to both cov2d diagonal entries
WEIGHT_CUTOFF = 1.0 / 255.0
TRANSMITTANCE_EPS = 1e-4  # compositing stops once T drops below this
DET_EPS = 1e-12           # singular cov2d cutoff; such Gaussians are skipped


@dataclass
class ProjectionResult:
    mean2d: np.ndarray   # [N, 2] pixels
    cov2d: np.ndarray    # [N, 2, 2] pixels^2 (low-pass term included)
    depth: np.ndarray    # [N] camera-space z (m)
    visible: np.ndarray  # [N] bool, False once z <= near
    t_cam: np.ndarray    # [N, 3] camera-space positions


@dataclass
class RenderGrads:
    means: np.ndarray        # [N, 3]
    covariances: np.ndarray  # [N, 3, 3]
    opacities: np.ndarray    # [N]
    colors: np.ndarray       # [N, 3]


@dataclass
class _Cache:
    """Forward-pass byproducts reused by the analytic backward."""

    cam: Camera
    dtype: np.dtype
    n_total: int
    kept: np.ndarray         # [K] indices into the full set
    mean2d: np.ndarray       # [K, 2]
    conic: np.ndarray        # [K, 3] upper-tri inverse cov2d (a, b, c)
    opac: np.ndarray         # [K]
    colors: np.ndarray       # [K, 3]
    covs: np.ndarray         # [K, 3, 3] world-space covariances
    P: np.ndarray            # [K, 2, 3] projection Jacobian @ camera rotation
    t_cam: np.ndarray        # [K, 3]
    entry_gauss: np.ndarray  # [E] int32, compact Gaussian index per entry
    tile_start: np.ndarray   # [T+1] int64 CSR offsets
    n_tiles_x: int
    background: np.ndarray   # [3]


def project_arrays(means: np.ndarray, covs: np.ndarray, cam: Camera) -> ProjectionResult:
    """EWA projection: cov2d = J R Sigma R^T J^T + LOW_PASS * I."""
    dtype = means.dtype
    R = cam.rotation.astype(dtype)
    t = means @ R.T + cam.translation.astype(dtype)
    visible = t[:, 2] > cam.near
    tz = np.where(visible, t[:, 2], np.asarray(1.0, dtype))  # culled rows: dummy depth
    tx, ty = t[:, 0], t[:, 1]

    fx, fy = dtype.type(cam.fx), dtype.type(cam.fy)
    mean2d = np.stack([fx * tx / tz + cam.cx, fy * ty / tz + cam.cy], axis=1).astype(dtype)

    J = np.zeros((means.shape[0], 2, 3), dtype=dtype)
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / tz**2
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / tz**2
    P = J @ R  # [N, 2, 3]
    cov2d = np.einsum("nij,njk,nlk->nil", P, covs, P)
    cov2d[:, 0, 0] += dtype.type(LOW_PASS)
    cov2d[:, 1, 1] += dtype.type(LOW_PASS)
    return ProjectionResult(mean2d, cov2d, t[:, 2].copy(), visible, t)


def _bin_tiles(mean2d, A_all, C_all, det_all, depth, keep, width, height):
    """Conservative 3-sigma tile assignment, depth-sorted within each tile.

    Returns (entry_gauss, tile_start, n_tiles_x, kept_index); ties in depth
    break by Gaussian index so the ordering is fully deterministic.
    """
    n_tiles_x = (width + TILE - 1) // TILE
    n_tiles_y = (height + TILE - 1) // TILE
    n_tiles = n_tiles_x * n_tiles_y

    kept = np.flatnonzero(keep)
    m2d = mean2d[kept]
    A, C, det = A_all[kept], C_all[kept], det_all[kept]
    mid = 0.5 * (A + C)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(3.0 * np.sqrt(lam_max))

    x0 = np.clip(np.floor((m2d[:, 0] - radius) / TILE), 0, n_tiles_x).astype(np.int64)
    x1 = np.clip(np.floor((m2d[:, 0] + radius) / TILE) + 1, 0, n_tiles_x).astype(np.int64)
    y0 = np.clip(np.floor((m2d[:, 1] - radius) / TILE), 0, n_tiles_y).astype(np.int64)
    y1 = np.clip(np.floor((m2d[:, 1] + radius) / TILE) + 1, 0, n_tiles_y).astype(np.int64)
    nx = np.maximum(x1 - x0, 0)
    ny = np.maximum(y1 - y0, 0)
    cnt = nx * ny

    span = cnt > 0
    kept = kept[span]
    x0, nx, y0, cnt = x0[span], nx[span], y0[span], cnt[span]

    offsets = np.concatenate([[0], np.cumsum(cnt)])
    total = int(offsets[-1])
    eg = np.repeat(np.arange(len(kept)), cnt)
    within = np.arange(total) - np.repeat(offsets[:-1], cnt)
    tx = x0[eg] + within % nx[eg]
    ty = y0[eg] + within // nx[eg]
    tile_id = ty * n_tiles_x + tx

    order = np.lexsort((eg, depth[kept][eg], tile_id))
    entry_gauss = eg[order].astype(np.int32)
    tile_sorted = tile_id[order]
    tile_start = np.zeros(n_tiles + 1, dtype=np.int64)
    tile_start[1:] = np.cumsum(np.bincount(tile_sorted, minlength=n_tiles))
    return entry_gauss, tile_start, n_tiles_x, kept


def render_forward(
    means: np.ndarray,
    covs: np.ndarray,
    opacities: np.ndarray,
    colors: np.ndarray,
    cam: Camera,
    background: np.ndarray,
    kernels,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray, _Cache]:
    dtype = np.dtype(means.dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("rasterizer expects float32 or float64 inputs")
    for name, arr in (("covariances", covs), ("opacities", opacities), ("colors", colors)):
        if arr.dtype != dtype:
            raise ValueError(f"{name} dtype {arr.dtype} != means dtype {dtype}")
    background = np.ascontiguousarray(background, dtype=dtype)

    proj = project_arrays(means, covs, cam)
    A = proj.cov2d[:, 0, 0]
    # Off-diagonal symmetrized so per-entry covariance gradients are exact.
    B = 0.5 * (proj.cov2d[:, 0, 1] + proj.cov2d[:, 1, 0])
    C = proj.cov2d[:, 1, 1]
    det = A * C - B * B
    keep = proj.visible & (det > DET_EPS)

    entry_gauss, tile_start, n_tiles_x, kept = _bin_tiles(
        proj.mean2d, A, C, det, proj.depth, keep, cam.width, cam.height
    )

    inv_det = 1.0 / det[kept]
    conic = np.stack([C[kept] * inv_det, -B[kept] * inv_det, A[kept] * inv_det], axis=1)
    cache = _Cache(
        cam=cam,
        dtype=dtype,
        n_total=means.shape[0],
        kept=kept,
        mean2d=np.ascontiguousarray(proj.mean2d[kept]),
        conic=np.ascontiguousarray(conic.astype(dtype)),
        opac=np.ascontiguousarray(opacities[kept]),
        colors=np.ascontiguousarray(colors[kept]),
        covs=np.ascontiguousarray(covs[kept]),
        P=None,  # filled lazily in backward
        t_cam=np.ascontiguousarray(proj.t_cam[kept]),
        entry_gauss=entry_gauss,
        tile_start=tile_start,
        n_tiles_x=n_tiles_x,
        background=background,
    )

    rgb = np.empty((cam.height, cam.width, 3), dtype=dtype)
    alpha = np.empty((cam.height, cam.width), dtype=dtype)
    kernels.forward_tiles(
        cache.mean2d, cache.conic, cache.opac, cache.colors,
        entry_gauss, tile_start, n_tiles_x, cam.height, cam.width,
        background, rgb, alpha, int(threads),
    )
    return rgb, alpha, cache


def render_backward_cached(
    cache: _Cache,
    grad_rgb: np.ndarray,
    grad_alpha: np.ndarray,
    kernels,
    threads: int = 1,
) -> RenderGrads:
    dtype = cache.dtype
    cam = cache.cam
    grad_rgb = np.ascontiguousarray(grad_rgb, dtype=dtype)
    grad_alpha = np.ascontiguousarray(grad_alpha, dtype=dtype)
    if grad_rgb.shape != (cam.height, cam.width, 3) or grad_alpha.shape != (cam.height, cam.width):
        raise ValueError("gradient buffers do not match the forward render shape")

    n_entries = cache.entry_gauss.shape[0]
    e_dmean2d = np.zeros((n_entries, 2), dtype=dtype)
    e_dconic = np.zeros((n_entries, 3), dtype=dtype)
    e_dopac = np.zeros(n_entries, dtype=dtype)
    e_dcolor = np.zeros((n_entries, 3), dtype=dtype)
    kernels.backward_tiles(
        cache.mean2d, cache.conic, cache.opac, cache.colors,
        cache.entry_gauss, cache.tile_start, cache.n_tiles_x, cam.height, cam.width,
        grad_rgb, grad_alpha, cache.background,
        e_dmean2d, e_dconic, e_dopac, e_dcolor, int(threads),
    )

    # Deterministic reduction: entries are consumed in their stored order.
    k = cache.kept.shape[0]
    d_mean2d = np.zeros((k, 2), dtype=dtype)
    d_conic = np.zeros((k, 3), dtype=dtype)
    d_opac = np.zeros(k, dtype=dtype)
    d_color = np.zeros((k, 3), dtype=dtype)
    eg = cache.entry_gauss
    np.add.at(d_mean2d, eg, e_dmean2d)
    np.add.at(d_conic, eg, e_dconic)
    np.add.at(d_opac, eg, e_dopac)
    np.add.at(d_color, eg, e_dcolor)

    d_means, d_covs = _chain_to_world(cache, d_mean2d, d_conic)

    grads = RenderGrads(
        means=np.zeros((cache.n_total, 3), dtype=dtype),
        covariances=np.zeros((cache.n_total, 3, 3), dtype=dtype),
        opacities=np.zeros(cache.n_total, dtype=dtype),
        colors=np.zeros((cache.n_total, 3), dtype=dtype),
    )
    grads.means[cache.kept] = d_means
    grads.covariances[cache.kept] = d_covs
    grads.opacities[cache.kept] = d_opac
    grads.colors[cache.kept] = d_color
    return grads


def _chain_to_world(cache: _Cache, d_mean2d, d_conic):
    """Screen-space gradients -> gradients on world means and covariances."""
    dtype = cache.dtype
    cam = cache.cam
    R = cam.rotation.astype(dtype)
    fx, fy = dtype.type(cam.fx), dtype.type(cam.fy)
    tx, ty, tz = cache.t_cam[:, 0], cache.t_cam[:, 1], cache.t_cam[:, 2]
    k = tx.shape[0]

    if cache.P is None:
        J = np.zeros((k, 2, 3), dtype=dtype)
        J[:, 0, 0] = fx / tz
        J[:, 0, 2] = -fx * tx / tz**2
        J[:, 1, 1] = fy / tz
        J[:, 1, 2] = -fy * ty / tz**2
        cache.P = J @ R
    P = cache.P

    # conic = inv(cov2d): dL/dcov2d = -conic (dL/dconic) conic, with the
    # off-diagonal conic gradient split across the two symmetric entries.
    a, b, c = cache.conic[:, 0], cache.conic[:, 1], cache.conic[:, 2]
    lam = np.empty((k, 2, 2), dtype=dtype)
    lam[:, 0, 0], lam[:, 0, 1], lam[:, 1, 0], lam[:, 1, 1] = a, b, b, c
    g_lam = np.empty((k, 2, 2), dtype=dtype)
    g_lam[:, 0, 0] = d_conic[:, 0]
    g_lam[:, 0, 1] = g_lam[:, 1, 0] = 0.5 * d_conic[:, 1]
    g_lam[:, 1, 1] = d_conic[:, 2]
    g_cov2d = -np.einsum("nij,njk,nkl->nil", lam, g_lam, lam)

    d_covs = np.einsum("nji,njk,nkl->nil", P, g_cov2d, P)  # P^T G P
    d_P = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d, P, cache.covs)
    d_J = d_P @ R.T

    d_t = np.zeros((k, 3), dtype=dtype)
    d_t[:, 0] = d_mean2d[:, 0] * fx / tz - d_J[:, 0, 2] * fx / tz**2
    d_t[:, 1] = d_mean2d[:, 1] * fy / tz - d_J[:, 1, 2] * fy / tz**2
    d_t[:, 2] = (
        -d_mean2d[:, 0] * fx * tx / tz**2
        - d_mean2d[:, 1] * fy * ty / tz**2
        - d_J[:, 0, 0] * fx / tz**2
        - d_J[:, 1, 1] * fy / tz**2
        + d_J[:, 0, 2] * 2 * fx * tx / tz**3
        + d_J[:, 1, 2] * 2 * fy * ty / tz**3
    )
    d_means = d_t @ R  # t = R mu + tvec
    return d_means, d_covs
