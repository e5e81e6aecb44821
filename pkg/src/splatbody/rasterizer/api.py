"""Rasterizer public surface and kernel-backend selection.

The compiled Cython kernels are preferred when the extension built; the
pure-numpy fallback implements identical semantics. Selection happens at
import (override with SPLATBODY_BACKEND=python|compiled or `set_backend`).
"""

from __future__ import annotations

import os

import numpy as np

from ..camera import Camera
from ..gaussians import GaussianSet
from . import _cpu
from ._driver import (
    ProjectionResult,
    RenderGrads,
    project_arrays,
    render_backward_cached,
    render_forward,
)

try:
    from . import _kernels  # type: ignore[attr-defined]

    HAVE_COMPILED = True
except ImportError:  # pragma: no cover - depends on the build
    _kernels = None
    HAVE_COMPILED = False

_BACKENDS = {"python": _cpu}
if HAVE_COMPILED:
    _BACKENDS["compiled"] = _kernels

_active = os.environ.get("SPLATBODY_BACKEND", "compiled" if HAVE_COMPILED else "python")
if _active not in _BACKENDS:
    raise ImportError(
        f"requested rasterizer backend {_active!r} unavailable; built: {sorted(_BACKENDS)}"
    )

_default_threads = 1


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_BACKENDS)}")
    _active = name


def set_default_threads(n: int) -> None:
    global _default_threads
    _default_threads = max(1, int(n))


def default_threads() -> int:
    return _default_threads


def _kernel_module(backend: str | None):
    return _BACKENDS[backend or _active]


def _to_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.ascontiguousarray(x)


def _scene_arrays(gset: GaussianSet):
    means = _to_numpy(gset.means)
    dtype = means.dtype
    return (
        means,
        _to_numpy(gset.covariances).astype(dtype, copy=False),
        _to_numpy(gset.opacities).astype(dtype, copy=False),
        _to_numpy(gset.colors).astype(dtype, copy=False),
    )


def project(gset: GaussianSet, cam: Camera) -> ProjectionResult:
    """Screen-space means/covariances/depths with near-plane visibility."""
    means, covs, _, _ = _scene_arrays(gset)
    return project_arrays(means, covs, cam)


def render_arrays(
    gset: GaussianSet,
    cam: Camera,
    background=None,
    threads: int | None = None,
    backend: str | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward render to numpy (rgb [H,W,3], alpha [H,W])."""
    means, covs, opac, colors = _scene_arrays(gset)
    bg = np.zeros(3, dtype=means.dtype) if background is None else np.asarray(background)
    rgb, alpha, _ = render_forward(
        means, covs, opac, colors, cam, bg,
        _kernel_module(backend), threads or _default_threads,
    )
    return rgb, alpha


def render_backward(
    gset: GaussianSet,
    cam: Camera,
    background,
    grad_rgb: np.ndarray,
    grad_alpha: np.ndarray,
    threads: int | None = None,
    backend: str | None = None,
) -> RenderGrads:
    """Analytic adjoint of `render_arrays` for the same scene and camera."""
    means, covs, opac, colors = _scene_arrays(gset)
    bg = np.zeros(3, dtype=means.dtype) if background is None else np.asarray(background)
    kernels = _kernel_module(backend)
    n = threads or _default_threads
    _, _, cache = render_forward(means, covs, opac, colors, cam, bg, kernels, n)
    return render_backward_cached(cache, grad_rgb, grad_alpha, kernels, n)
