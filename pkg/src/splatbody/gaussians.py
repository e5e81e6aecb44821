"""Per-vertex Gaussian parameterization and the vertex-anchored scaffold.

Each Gaussian carries 14 raw degrees of freedom (offset 3, quaternion 4,
log-scale 3, opacity logit 1, color 3). `scaffold` activates them into
renderable world-space Gaussians whose means ride on the body vertices:
mean_n = vertex_{n // g} + offset_n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .rotations import normalize_quaternion, quaternion_to_matrix

SCALE_MIN = 1e-4  # meters; clamp keeps covariances non-degenerate
SCALE_MAX = 0.5   # meters; and keeps single Gaussians from filling the scene

RAW_DOF = 14  # 3 + 4 + 3 + 1 + 3


@dataclass
class GaussianAttributes:
    """Raw (pre-activation) per-Gaussian parameters, one row per Gaussian."""

    offsets: Tensor         # [N, 3] meters
    rotations: Tensor       # [N, 4] quaternions, unnormalized
    log_scales: Tensor      # [N, 3] log-meters
    opacity_logits: Tensor  # [N, 1]
    colors_raw: Tensor      # [N, 3]

    def __post_init__(self):
        n = self.offsets.shape[0]
        shapes = {
            "offsets": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n, 1),
            "colors_raw": (n, 3),
        }
        for name, want in shapes.items():
            t = getattr(self, name)
            if tuple(t.shape) != want:
                raise ValueError(f"{name} must have shape {want}, got {tuple(t.shape)}")
            if not bool(torch.isfinite(t.detach()).all()):
                raise ValueError(f"{name} contains non-finite values")
        assert sum(s[1] for s in shapes.values()) == RAW_DOF

    @property
    def count(self) -> int:
        return self.offsets.shape[0]

    def tensors(self) -> tuple[Tensor, ...]:
        return (self.offsets, self.rotations, self.log_scales, self.opacity_logits, self.colors_raw)


@dataclass
class GaussianSet:
    """Activated world-space Gaussians ready for rendering."""

    means: Tensor        # [N, 3] meters
    covariances: Tensor  # [N, 3, 3] symmetric PSD
    opacities: Tensor    # [N] in [0, 1]
    colors: Tensor       # [N, 3] in [0, 1]

    @property
    def count(self) -> int:
        return self.means.shape[0]


@dataclass
class ScaffoldConfig:
    gaussians_per_vertex: int = 1  # 1, 2 or 3
    fixed_opacity_one: bool = False
    scale_min: float = SCALE_MIN
    scale_max: float = SCALE_MAX

    def __post_init__(self):
        if self.gaussians_per_vertex not in (1, 2, 3):
            raise ValueError("gaussians_per_vertex must be 1, 2 or 3")
        if not 0 < self.scale_min < self.scale_max:
            raise ValueError("scale bounds must satisfy 0 < scale_min < scale_max")


def scaffold(
    vertices: Tensor, attrs: GaussianAttributes, cfg: ScaffoldConfig | None = None
) -> GaussianSet:
    """Activate raw attributes against body vertices.

    mean_n = vertex_{n // g} + offset_n; covariance = R(q) S S^T R(q)^T with
    S = diag(exp(log_scales)) clamped to [SCALE_MIN, SCALE_MAX]; opacity and
    color pass through sigmoids (opacity pinned to 1 under fixed_opacity_one).
    Differentiable in both vertices and attributes.
    """
    cfg = cfg or ScaffoldConfig()
    g = cfg.gaussians_per_vertex
    if attrs.count != vertices.shape[0] * g:
        raise ValueError(
            f"attribute rows ({attrs.count}) != vertices ({vertices.shape[0]}) x {g}"
        )
    if not bool(torch.isfinite(vertices.detach()).all()):
        raise ValueError("vertices contain non-finite values")

    anchors = vertices if g == 1 else vertices.repeat_interleave(g, dim=0)
    means = anchors + attrs.offsets

    R = quaternion_to_matrix(normalize_quaternion(attrs.rotations))  # [N, 3, 3]
    scales = torch.clamp(torch.exp(attrs.log_scales), cfg.scale_min, cfg.scale_max)
    M = R * scales[:, None, :]  # columns scaled: R @ diag(s)
    covariances = M @ M.transpose(-1, -2)

    if cfg.fixed_opacity_one:
        opacities = torch.ones_like(attrs.opacity_logits[:, 0])
    else:
        opacities = torch.sigmoid(attrs.opacity_logits[:, 0])
    colors = torch.sigmoid(attrs.colors_raw)
    return GaussianSet(means, covariances, opacities, colors)


class _OffsetNorms(torch.autograd.Function):
    """Row norms with the zero-safe gradient d/d_delta = delta / max(|delta|, eps)."""

    EPS = 1e-8

    @staticmethod
    def forward(ctx, offsets):
        norms = torch.linalg.vector_norm(offsets, dim=-1)
        ctx.save_for_backward(offsets, norms)
        return norms

    @staticmethod
    def backward(ctx, grad_out):
        offsets, norms = ctx.saved_tensors
        denom = torch.clamp(norms, min=_OffsetNorms.EPS)
        return grad_out.unsqueeze(-1) * offsets / denom.unsqueeze(-1)


def tightness(attrs: GaussianAttributes) -> Tensor:
    """Mean L2 norm of the offsets (norm, not squared norm)."""
    return _OffsetNorms.apply(attrs.offsets).mean()


def init_attributes(
    vertices: Tensor,
    gaussians_per_vertex: int = 1,
    opacity: float = 0.9,
    dtype: torch.dtype | None = None,
) -> GaussianAttributes:
    """Default starting point: Gaussians sit exactly on the body surface.

    Offsets 0, identity rotations, opacity logit at sigmoid^-1(opacity),
    colors at mid-gray, log-scales at ln(mean nearest-vertex distance / 2).
    """
    dtype = dtype or vertices.dtype
    n = vertices.shape[0] * gaussians_per_vertex
    quat = torch.zeros(n, 4, dtype=dtype)
    quat[:, 0] = 1.0
    scale = mean_nearest_distance(vertices) / 2.0
    return GaussianAttributes(
        offsets=torch.zeros(n, 3, dtype=dtype),
        rotations=quat,
        log_scales=torch.full((n, 3), float(np.log(scale)), dtype=dtype),
        opacity_logits=torch.full((n, 1), float(np.log(opacity / (1 - opacity))), dtype=dtype),
        colors_raw=torch.zeros(n, 3, dtype=dtype),
    )


def mean_nearest_distance(vertices: Tensor, fallback: float = 0.05) -> float:
    v = vertices.detach().cpu().numpy()
    if v.shape[0] < 2:
        return fallback
    from scipy.spatial import cKDTree

    d, _ = cKDTree(v).query(v, k=2)
    out = float(d[:, 1].mean())
    return out if np.isfinite(out) and out > 0 else fallback


def export_ply(gset: GaussianSet, path) -> None:
    """Write the community splat layout (x/y/z, normals, f_dc_*, opacity,
    scale_*, rot_*) so external viewers can open the set. Raw values are
    recovered by inverting the activations; covariances are eigen-factored."""
    means = gset.means.detach().cpu().numpy().astype(np.float32)
    covs = gset.covariances.detach().cpu().numpy().astype(np.float64)
    opac = gset.opacities.detach().cpu().numpy().astype(np.float64)
    cols = gset.colors.detach().cpu().numpy().astype(np.float64)
    n = means.shape[0]

    evals, evecs = np.linalg.eigh(covs)  # ascending
    evals = np.maximum(evals, 1e-12)
    # Ensure right-handed frames before quaternion extraction.
    flip = np.linalg.det(evecs) < 0
    evecs[flip, :, 2] *= -1.0
    scales = np.log(np.sqrt(evals)).astype(np.float32)
    quats = _matrix_to_quat(evecs).astype(np.float32)

    sh_c0 = 0.28209479177387814
    f_dc = ((cols - 0.5) / sh_c0).astype(np.float32)
    opac = np.clip(opac, 1e-6, 1 - 1e-6)
    opac_logit = np.log(opac / (1 - opac)).astype(np.float32)

    names = (
        ["x", "y", "z", "nx", "ny", "nz"]
        + [f"f_dc_{i}" for i in range(3)]
        + ["opacity"]
        + [f"scale_{i}" for i in range(3)]
        + [f"rot_{i}" for i in range(4)]
    )
    data = np.zeros((n, len(names)), dtype=np.float32)
    data[:, 0:3] = means
    data[:, 6:9] = f_dc
    data[:, 9] = opac_logit
    data[:, 10:13] = scales
    data[:, 13:17] = quats

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header += ["end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.astype("<f4").tobytes())


def _matrix_to_quat(R: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    q = Rotation.from_matrix(R).as_quat()  # (x, y, z, w)
    return np.concatenate([q[:, 3:4], q[:, :3]], axis=1)  # -> (w, x, y, z)
