"""Torch bridge: the renderer as a custom autograd function.

The forward pass and the backward pass are both the analytic kernels; torch
only supplies the tape around them, so gradients reaching the Gaussian set
are exactly the adjoint of the compositing math.
"""

from __future__ import annotations

import numpy as np
import torch

from ..camera import Camera, ImageBuffer
from ..gaussians import GaussianSet
from . import api
from ._driver import render_backward_cached, render_forward


class _RenderFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, covariances, opacities, colors, cam, background, backend, threads):
        kernels = api._kernel_module(backend)
        rgb, alpha, cache = render_forward(
            np.ascontiguousarray(means.detach().numpy()),
            np.ascontiguousarray(covariances.detach().numpy()),
            np.ascontiguousarray(opacities.detach().numpy()),
            np.ascontiguousarray(colors.detach().numpy()),
            cam,
            background,
            kernels,
            threads,
        )
        ctx.cache = cache
        ctx.kernels = kernels
        ctx.threads = threads
        return torch.from_numpy(rgb), torch.from_numpy(alpha)

    @staticmethod
    def backward(ctx, grad_rgb, grad_alpha):
        grads = render_backward_cached(
            ctx.cache,
            grad_rgb.detach().numpy(),
            grad_alpha.detach().numpy(),
            ctx.kernels,
            ctx.threads,
        )
        return (
            torch.from_numpy(grads.means),
            torch.from_numpy(grads.covariances),
            torch.from_numpy(grads.opacities),
            torch.from_numpy(grads.colors),
            None,
            None,
            None,
            None,
        )


def render(
    gset: GaussianSet,
    cam: Camera,
    background=None,
    threads: int | None = None,
    backend: str | None = None,
) -> ImageBuffer:
    """Differentiable render of a Gaussian set into an RGB+alpha buffer."""
    dtype = gset.means.dtype
    if background is None:
        bg = np.zeros(3, dtype=torch.empty(0, dtype=dtype).numpy().dtype)
    else:
        bg = np.asarray(
            background.detach().numpy() if torch.is_tensor(background) else background
        )
    rgb, alpha = _RenderFunction.apply(
        gset.means,
        gset.covariances,
        gset.opacities,
        gset.colors,
        cam,
        bg,
        backend,
        threads or api.default_threads(),
    )
    return ImageBuffer(rgb, alpha)
