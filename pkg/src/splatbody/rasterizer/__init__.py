from ._driver import (
    DET_EPS,
    LOW_PASS,
    TILE,
    TRANSMITTANCE_EPS,
    WEIGHT_CUTOFF,
    ProjectionResult,
    RenderGrads,
)
from .api import (
    HAVE_COMPILED,
    active_backend,
    available_backends,
    default_threads,
    project,
    render_arrays,
    render_backward,
    set_backend,
    set_default_threads,
)
from .autograd import render

__all__ = [
    "TILE", "LOW_PASS", "WEIGHT_CUTOFF", "TRANSMITTANCE_EPS", "DET_EPS",
    "ProjectionResult", "RenderGrads", "HAVE_COMPILED",
    "active_backend", "available_backends", "set_backend",
    "default_threads", "set_default_threads",
    "project", "render", "render_arrays", "render_backward",
]
