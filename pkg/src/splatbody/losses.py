"""Training objective: image terms (MSE + perceptual + opacity mask),
offset-tightness regularization and the optional shape-coefficient penalty.

All terms are torch scalars so gradients reach rendered images and raw
parameters; reports detach to plain floats only when serialized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .body import ShapeParams
from .camera import ImageBuffer
from .gaussians import GaussianAttributes, tightness


@dataclass
class LossWeights:
    lambda_perceptual: float = 0.01
    lambda_alpha: float = 0.1
    lambda_tight: float = 0.1
    lambda_beta: float = 0.0

    def __post_init__(self):
        for name in ("lambda_perceptual", "lambda_alpha", "lambda_tight", "lambda_beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossReport:
    mse: Tensor
    perceptual: Tensor
    alpha_mask: Tensor
    tight: Tensor
    beta_reg: Tensor
    total: Tensor
    weights: LossWeights
    per_view: list[dict[str, float]] = field(default_factory=list)

    def item(self) -> float:
        return float(self.total.detach())

    def scalars(self) -> dict[str, float]:
        return {
            "mse": float(self.mse.detach()),
            "perceptual": float(self.perceptual.detach()),
            "alpha_mask": float(self.alpha_mask.detach()),
            "tight": float(self.tight.detach()),
            "beta_reg": float(self.beta_reg.detach()),
            "total": float(self.total.detach()),
        }

    def to_json_line(self, step: int | None = None) -> str:
        row = {} if step is None else {"step": step}
        row.update(self.scalars())
        return json.dumps(row)

    CSV_FIELDS = ("step", "mse", "perceptual", "alpha_mask", "tight", "beta_reg", "total")

    def to_csv_row(self, step: int) -> str:
        s = self.scalars()
        return ",".join([str(step)] + [f"{s[k]:.10g}" for k in self.CSV_FIELDS[1:]])


def _grayscale(img: Tensor) -> Tensor:
    return img.mean(dim=-1) if img.ndim == 3 else img


def _gaussian_kernel1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _ssim_torch(a: Tensor, b: Tensor, window: int = 11, sigma: float = 1.5) -> Tensor:
    """Windowed SSIM on grayscale tensors [H, W]; mean over valid windows.

    The window shrinks (to the largest odd size that fits) on images smaller
    than 11 pixels so coarse pyramid scales and small crops stay usable.
    """
    h, w = a.shape
    win = min(window, h, w)
    if win % 2 == 0:
        win -= 1
    if win < 3:
        raise ValueError(f"image {h}x{w} too small for SSIM")
    k1d = torch.as_tensor(_gaussian_kernel1d(win, sigma), dtype=a.dtype)
    ky = k1d.reshape(1, 1, win, 1)
    kx = k1d.reshape(1, 1, 1, win)

    def filt(x):
        out = F.conv2d(F.conv2d(x.reshape(1, 1, h, w), ky), kx)
        return out.reshape(h - win + 1, w - win + 1)

    c1, c2 = 0.01**2, 0.03**2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return ssim_map.mean()


def _sobel_magnitude(gray: Tensor) -> Tensor:
    kx = torch.tensor(
        [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=gray.dtype
    ).reshape(1, 1, 3, 3)
    ky = kx.transpose(-1, -2)
    x = gray.reshape(1, 1, *gray.shape)
    x = F.pad(x, (1, 1, 1, 1), mode="reflect")
    gx = F.conv2d(x, kx)
    gy = F.conv2d(x, ky)
    return torch.sqrt(gx * gx + gy * gy + 1e-12).reshape(gray.shape)


def perceptual_proxy(a: Tensor, b: Tensor, scales: int = 3) -> Tensor:
    """Multi-scale structural dissimilarity plus an edge-map term.

    mean over `scales` dyadic scales of (1 - SSIM)/2, plus the mean absolute
    difference of Sobel gradient magnitudes at full resolution. Symmetric,
    zero iff the images are equal. Stands behind the pluggable perceptual
    interface (see `PERCEPTUAL_REGISTRY`).
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    ga, gb = _grayscale(a), _grayscale(b)
    terms = []
    xa, xb = ga, gb
    for s in range(scales):
        if s > 0:
            xa = F.avg_pool2d(xa.reshape(1, 1, *xa.shape), 2).reshape(xa.shape[0] // 2, -1)
            xb = F.avg_pool2d(xb.reshape(1, 1, *xb.shape), 2).reshape(xb.shape[0] // 2, -1)
        terms.append((1.0 - _ssim_torch(xa, xb)) / 2.0)
    out = torch.stack(terms).mean()
    out = out + (_sobel_magnitude(ga) - _sobel_magnitude(gb)).abs().mean()
    return out


# Pluggable perceptual term: an external LPIPS adapter may be registered
# under its own key and selected by name in LossWeights consumers.
PERCEPTUAL_REGISTRY = {"proxy": perceptual_proxy}


def image_loss(
    renders: list[ImageBuffer],
    targets: list[tuple[Tensor, Tensor]],
    weights: LossWeights,
    perceptual: str = "proxy",
) -> LossReport:
    """Mean over views of MSE + weighted perceptual + weighted mask term.

    `targets` pairs each view's ground-truth image [H,W,3] with its binary
    mask [H,W]; masks gate nothing here, they are compared against rendered
    alpha. Differentiable w.r.t. the rendered buffers.
    """
    if len(renders) != len(targets):
        raise ValueError(f"{len(renders)} renders vs {len(targets)} targets")
    if not renders:
        raise ValueError("at least one view required")
    perc_fn = PERCEPTUAL_REGISTRY[perceptual]

    mse_terms, perc_terms, alpha_terms, per_view = [], [], [], []
    for buf, (target, mask) in zip(renders, targets):
        if buf.rgb.shape != target.shape:
            raise ValueError(
                f"render {tuple(buf.rgb.shape)} vs target {tuple(target.shape)}"
            )
        if buf.alpha.shape != mask.shape:
            raise ValueError("alpha/mask shape mismatch")
        m = mask.detach()
        if not bool(((m == 0) | (m == 1)).all()):
            raise ValueError("masks must be binary {0, 1}")
        mse = ((target - buf.rgb) ** 2).mean()
        alpha = ((mask - buf.alpha) ** 2).mean()
        if weights.lambda_perceptual > 0:
            perc = perc_fn(buf.rgb, target)
        else:
            perc = torch.zeros((), dtype=mse.dtype)
        mse_terms.append(mse)
        perc_terms.append(perc)
        alpha_terms.append(alpha)
        per_view.append(
            {"mse": float(mse.detach()), "perceptual": float(perc.detach()),
             "alpha_mask": float(alpha.detach())}
        )

    mse = torch.stack(mse_terms).mean()
    perc = torch.stack(perc_terms).mean()
    alpha = torch.stack(alpha_terms).mean()
    zero = torch.zeros((), dtype=mse.dtype)
    total = mse + weights.lambda_perceptual * perc + weights.lambda_alpha * alpha
    return LossReport(
        mse=mse, perceptual=perc, alpha_mask=alpha,
        tight=zero, beta_reg=zero, total=total,
        weights=weights, per_view=per_view,
    )


def total_loss(
    image_report: LossReport, attrs: GaussianAttributes, shape: ShapeParams, weights: LossWeights
) -> LossReport:
    """Complete objective: image terms + tightness + optional beta penalty."""
    tight = tightness(attrs)
    beta_reg = (shape.betas**2).sum().to(tight.dtype)
    total = (
        image_report.mse
        + weights.lambda_perceptual * image_report.perceptual
        + weights.lambda_alpha * image_report.alpha_mask
        + weights.lambda_tight * tight
        + weights.lambda_beta * beta_reg
    )
    return LossReport(
        mse=image_report.mse,
        perceptual=image_report.perceptual,
        alpha_mask=image_report.alpha_mask,
        tight=tight,
        beta_reg=beta_reg,
        total=total,
        weights=weights,
        per_view=image_report.per_view,
    )
