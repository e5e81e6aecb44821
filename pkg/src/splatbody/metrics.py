"""Evaluation metrics: PSNR, windowed SSIM, root-aligned joint error.

The perceptual column produced by evaluation harnesses is the structural
proxy from `losses.perceptual_proxy`, reported under its own name (it is not
an LPIPS value and is never labeled as one).
"""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from .camera import Camera
from .losses import _gaussian_kernel1d

PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0,1]; identical images cap at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Structural similarity, 11x11 Gaussian window (sigma 1.5), k1=0.01,
    k2=0.03, dynamic range 1, averaged over fully-valid windows. Multichannel
    input is converted to grayscale by channel mean."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=2), b.mean(axis=2)
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")

    k1d = _gaussian_kernel1d(window, sigma)
    kern = np.outer(k1d, k1d)

    def filt(x):
        return convolve2d(x, kern, mode="valid")

    c1, c2 = 0.01**2, 0.03**2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(ssim_map.mean())


def mpjpe(pred_joints: np.ndarray, gt_joints: np.ndarray) -> float:
    """Mean per-joint L2 error in millimeters after root alignment.

    Both sets are translated so joint 0 sits at the origin; no rotational
    (Procrustes) alignment is applied.
    """
    pred = np.asarray(pred_joints, dtype=np.float64)
    gt = np.asarray(gt_joints, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"joint arrays must match as [J, 3]: {pred.shape} vs {gt.shape}")
    pred = pred - pred[0]
    gt = gt - gt[0]
    return float(1000.0 * np.linalg.norm(pred - gt, axis=1).mean())


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks (empty/empty -> 1)."""
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def project_points(cam: Camera, points: np.ndarray) -> np.ndarray:
    """World points [N,3] -> pixel coordinates [N,2] (no culling)."""
    t = points @ cam.rotation.T + cam.translation
    tz = np.maximum(t[:, 2], 1e-9)
    return np.stack([cam.fx * t[:, 0] / tz + cam.cx, cam.fy * t[:, 1] / tz + cam.cy], axis=1)


def body_bbox_2d(cam: Camera, points: np.ndarray, pad: int = 4) -> tuple[int, int, int, int]:
    """Image-space bounding box (x0, y0, x1, y1) of the projected 3D AABB of
    `points`, padded and clamped to the image. Used for masked metrics."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    corners = np.array(
        [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    )
    pix = project_points(cam, corners)
    x0 = int(np.clip(np.floor(pix[:, 0].min()) - pad, 0, cam.width))
    x1 = int(np.clip(np.ceil(pix[:, 0].max()) + pad, 0, cam.width))
    y0 = int(np.clip(np.floor(pix[:, 1].min()) - pad, 0, cam.height))
    y1 = int(np.clip(np.ceil(pix[:, 1].max()) + pad, 0, cam.height))
    return x0, y0, x1, y1
