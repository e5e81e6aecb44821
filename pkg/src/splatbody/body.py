"""Parametric skinned body: pose/shape -> posed vertices and joints via LBS.

The model data lives in numpy (it is immutable reference data and maps 1:1
onto the on-disk container); the skinning math runs in torch so vertices are
differentiable in the pose rotations, shape coefficients and root translation.

A procedural capsule-limb humanoid stands in for licensed mesh assets: same
vertex/joint/blendshape semantics, 24 joints in the conventional kinematic
tree order, deterministic per seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .rotations import is_rotation_matrix

# Kinematic tree (24 joints): pelvis root, legs, spine, neck/head, arms.
PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21],
    dtype=np.int64,
)

# Rest-pose joint centers (meters, y-up, T-pose, standing on y=0).
_REST_JOINTS = np.array(
    [
        [0.00, 0.95, 0.00],   # 0  pelvis
        [-0.09, 0.91, 0.00],  # 1  left hip
        [0.09, 0.91, 0.00],   # 2  right hip
        [0.00, 1.06, 0.00],   # 3  spine1
        [-0.10, 0.50, 0.00],  # 4  left knee
        [0.10, 0.50, 0.00],   # 5  right knee
        [0.00, 1.16, 0.00],   # 6  spine2
        [-0.11, 0.09, 0.00],  # 7  left ankle
        [0.11, 0.09, 0.00],   # 8  right ankle
        [0.00, 1.28, 0.00],   # 9  spine3
        [-0.12, 0.02, 0.12],  # 10 left foot
        [0.12, 0.02, 0.12],   # 11 right foot
        [0.00, 1.45, 0.00],   # 12 neck
        [-0.07, 1.40, 0.00],  # 13 left collar
        [0.07, 1.40, 0.00],   # 14 right collar
        [0.00, 1.58, 0.00],   # 15 head
        [-0.17, 1.42, 0.00],  # 16 left shoulder
        [0.17, 1.42, 0.00],   # 17 right shoulder
        [-0.42, 1.42, 0.00],  # 18 left elbow
        [0.42, 1.42, 0.00],   # 19 right elbow
        [-0.65, 1.42, 0.00],  # 20 left wrist
        [0.65, 1.42, 0.00],   # 21 right wrist
        [-0.72, 1.42, 0.00],  # 22 left hand
        [0.72, 1.42, 0.00],   # 23 right hand
    ]
)

# Capsule radius per bone, indexed by child joint 1..23.
_BONE_RADII = {
    1: 0.09, 2: 0.09, 3: 0.12, 4: 0.07, 5: 0.07, 6: 0.12, 7: 0.05, 8: 0.05,
    9: 0.11, 10: 0.04, 11: 0.04, 12: 0.05, 13: 0.06, 14: 0.06, 15: 0.09,
    16: 0.05, 17: 0.05, 18: 0.045, 19: 0.045, 20: 0.035, 21: 0.035,
    22: 0.03, 23: 0.03,
}

MAGIC = b"GSTB"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class BodyModel:
    """Immutable skinned-body data; safe to share across threads."""

    template_vertices: np.ndarray  # [V, 3] rest-pose positions (m)
    shape_blendshapes: np.ndarray  # [V, 3, B] per-unit-coefficient displacement (m)
    skinning_weights: np.ndarray   # [V, J] convex weights over joints
    joint_regressor: np.ndarray    # [J, V] rows sum to 1
    parents: np.ndarray            # [J] parent indices, parents[0] == -1

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def num_betas(self) -> int:
        return self.shape_blendshapes.shape[2]

    def __post_init__(self):
        V, J, B = self.num_vertices, self.num_joints, self.num_betas
        if self.template_vertices.shape != (V, 3):
            raise ValueError("template_vertices must be [V, 3]")
        if self.shape_blendshapes.shape != (V, 3, B):
            raise ValueError("shape_blendshapes must be [V, 3, B]")
        if self.skinning_weights.shape != (V, J):
            raise ValueError(f"skinning_weights must be [{V}, {J}]")
        if self.joint_regressor.shape != (J, V):
            raise ValueError(f"joint_regressor must be [{J}, {V}]")
        if np.any(self.skinning_weights < 0):
            raise ValueError("skinning weights must be nonnegative")
        if not np.allclose(self.skinning_weights.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("skinning weight rows must sum to 1")
        if not np.allclose(self.joint_regressor.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("joint regressor rows must sum to 1")
        _check_tree(self.parents)

    def rest_joints(self) -> np.ndarray:
        return self.joint_regressor @ self.template_vertices


@dataclass
class PoseParams:
    """Per-joint rotation matrices (joint 0 = global orientation) + root shift."""

    joint_rotations: Tensor  # [J, 3, 3]
    root_translation: Tensor  # [3]
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.joint_rotations = torch.as_tensor(self.joint_rotations)
        self.root_translation = torch.as_tensor(
            self.root_translation, dtype=self.joint_rotations.dtype
        )
        if self.joint_rotations.ndim != 3 or self.joint_rotations.shape[-2:] != (3, 3):
            raise ValueError("joint_rotations must be [J, 3, 3]")
        if self.root_translation.shape != (3,):
            raise ValueError("root_translation must be a 3-vector")
        if self.validate and not is_rotation_matrix(self.joint_rotations):
            raise ValueError("joint_rotations contains a non-rotation block")

    @classmethod
    def identity(cls, num_joints: int = 24, dtype=torch.float32) -> "PoseParams":
        return cls(
            torch.eye(3, dtype=dtype).expand(num_joints, 3, 3).contiguous(),
            torch.zeros(3, dtype=dtype),
        )


@dataclass
class ShapeParams:
    betas: Tensor  # [B]

    MAX_ABS = 10.0  # guards degenerate meshes

    def __post_init__(self):
        self.betas = torch.as_tensor(self.betas)
        if self.betas.ndim != 1:
            raise ValueError("betas must be a 1D array")
        if not bool(torch.isfinite(self.betas.detach()).all()):
            raise ValueError("betas must be finite")
        if bool((self.betas.detach().abs() > self.MAX_ABS).any()):
            raise ValueError(f"|beta| must be <= {self.MAX_ABS}")

    @classmethod
    def zeros(cls, num_betas: int = 10, dtype=torch.float32) -> "ShapeParams":
        return cls(torch.zeros(num_betas, dtype=dtype))


def _check_tree(parents: np.ndarray):
    if parents[0] != -1:
        raise ValueError("joint 0 must be the root (parent -1)")
    for j in range(1, len(parents)):
        if not 0 <= parents[j] < j:
            raise ValueError("parents must reference earlier joints (tree order)")


def lbs(
    template: Tensor,       # [V, 3]
    blendshapes: Tensor,    # [V, 3, B]
    regressor: Tensor,      # [J, V]
    weights: Tensor,        # [V, J]
    parents: np.ndarray,    # [J]
    rotations: Tensor,      # [J, 3, 3]
    betas: Tensor,          # [B]
    translation: Tensor,    # [3]
) -> tuple[Tensor, Tensor]:
    """Differentiable linear blend skinning core.

    Shaped rest vertices = template + blendshapes @ betas; rest joints are
    regressed from them; world joint transforms compose along the tree; each
    vertex is the weight-blended image under the per-joint rigid maps, with
    the root translation added last. Returns (vertices [V,3], joints [J,3]).
    """
    J = rotations.shape[0]
    shaped = template + torch.einsum("vcb,b->vc", blendshapes, betas)  # [V, 3]
    rest_joints = regressor @ shaped  # [J, 3]

    # Compose world transforms R_w[j], t_w[j] down the tree; the local frame
    # of joint j sits at its rest offset from the parent.
    rot_w: list[Tensor] = [rotations[0]]
    pos_w: list[Tensor] = [rest_joints[0]]
    for j in range(1, J):
        p = int(parents[j])
        offset = rest_joints[j] - rest_joints[p]
        rot_w.append(rot_w[p] @ rotations[j])
        pos_w.append(pos_w[p] + rot_w[p] @ offset)
    R_w = torch.stack(rot_w)  # [J, 3, 3]
    t_w = torch.stack(pos_w)  # [J, 3]

    # Rigid map of joint j applied to a rest point x: R_w[j] (x - rj) + t_w[j].
    rel = shaped.unsqueeze(0) - rest_joints.unsqueeze(1)          # [J, V, 3]
    per_joint = torch.einsum("jab,jvb->jva", R_w, rel) + t_w[:, None, :]
    vertices = torch.einsum("vj,jvc->vc", weights, per_joint) + translation
    joints = t_w + translation
    return vertices, joints


def forward_lbs(
    model: BodyModel, pose: PoseParams, shape: ShapeParams
) -> tuple[Tensor, Tensor]:
    """Pose/shape the model; output differentiable in pose and shape tensors."""
    if pose.joint_rotations.shape[0] != model.num_joints:
        raise ValueError(
            f"pose has {pose.joint_rotations.shape[0]} joints, model has {model.num_joints}"
        )
    if shape.betas.shape[0] != model.num_betas:
        raise ValueError(
            f"shape has {shape.betas.shape[0]} betas, model has {model.num_betas}"
        )
    dtype = pose.joint_rotations.dtype
    return lbs(
        torch.as_tensor(model.template_vertices, dtype=dtype),
        torch.as_tensor(model.shape_blendshapes, dtype=dtype),
        torch.as_tensor(model.joint_regressor, dtype=dtype),
        torch.as_tensor(model.skinning_weights, dtype=dtype),
        model.parents,
        pose.joint_rotations,
        shape.betas,
        pose.root_translation,
    )


@dataclass
class SyntheticBodyConfig:
    num_vertices: int = 6890
    num_betas: int = 10
    seed: int = 0
    radius_scale: float = 1.0
    blendshape_amplitude: float = 0.01  # meters per unit beta
    skinning_temperature: float = 0.04  # meters; softmax sharpness
    regressor_neighbors: int = 6


def build_synthetic_model(config: SyntheticBodyConfig) -> BodyModel:
    """Deterministic capsule-limb humanoid with the full BodyModel contract.

    Vertices are sampled on per-bone capsules (counts proportional to capsule
    area, largest-remainder rounding so they total exactly V). Skinning
    weights are a softmax of negative distance to the two nearest joint
    segments; blendshapes are smooth radial inflation modes.
    """
    V, B = config.num_vertices, config.num_betas
    bones = [(int(PARENTS[j]), j) for j in range(1, 24)]
    if V < len(bones):
        raise ValueError(f"V={V} not representable: need at least {len(bones)} vertices")

    rng = np.random.default_rng(config.seed)
    joints = _REST_JOINTS.copy()

    lengths = np.array([np.linalg.norm(joints[c] - joints[p]) for p, c in bones])
    radii = np.array([_BONE_RADII[c] * config.radius_scale for _, c in bones])
    counts = _apportion(V, lengths * radii)

    verts = np.empty((V, 3))
    radial = np.empty((V, 3))  # unit radial direction, reused by blendshapes
    row = 0
    for (p, c), n, r in zip(bones, counts, radii):
        p0, p1 = joints[p], joints[c]
        axis = p1 - p0
        L = np.linalg.norm(axis)
        axis = axis / L
        e1, e2 = _perp_frame(axis)
        t = rng.uniform(0.0, L, size=n)
        phi = rng.uniform(0.0, 2 * np.pi, size=n)
        rad = np.outer(np.cos(phi), e1) + np.outer(np.sin(phi), e2)
        verts[row : row + n] = p0 + np.outer(t, axis) + r * rad
        radial[row : row + n] = rad
        row += n

    # Influence segment of joint j: rest bones emanating from j (the joint
    # point itself for leaves). Two nearest segments get softmax weights.
    children: list[list[int]] = [[] for _ in range(24)]
    for p, c in bones:
        children[p].append(c)
    dists = np.empty((V, 24))
    for j in range(24):
        if children[j]:
            d = np.min(
                [_point_segment_distance(verts, joints[j], joints[c]) for c in children[j]],
                axis=0,
            )
        else:
            d = np.linalg.norm(verts - joints[j], axis=1)
        dists[:, j] = d
    near2 = np.argsort(dists, axis=1, kind="stable")[:, :2]  # [V, 2]
    d2 = np.take_along_axis(dists, near2, axis=1)
    logits = -d2 / config.skinning_temperature
    logits -= logits.max(axis=1, keepdims=True)
    w2 = np.exp(logits)
    w2 /= w2.sum(axis=1, keepdims=True)
    weights = np.zeros((V, 24))
    np.put_along_axis(weights, near2, w2, axis=1)

    # Joint regressor: inverse-distance weights over the nearest template
    # vertices around each joint.
    k = min(config.regressor_neighbors, V)
    regressor = np.zeros((24, V))
    for j in range(24):
        d = np.linalg.norm(verts - joints[j], axis=1)
        idx = np.argsort(d, kind="stable")[:k]
        w = 1.0 / (d[idx] + 1e-3)
        regressor[j, idx] = w / w.sum()

    # Radial inflation modes, modulated smoothly along body height.
    height = verts[:, 1]
    h = (height - height.min()) / max(height.max() - height.min(), 1e-9)
    blend = np.empty((V, 3, B))
    for b in range(B):
        profile = np.cos(np.pi * b * h + 0.5 * b)  # mode 0 = uniform inflation
        blend[:, :, b] = config.blendshape_amplitude * profile[:, None] * radial
    return BodyModel(verts, blend, weights, regressor, PARENTS.copy())


def _apportion(total: int, scores: np.ndarray) -> np.ndarray:
    """Split `total` proportionally to `scores`, >=1 each, exact sum."""
    n = len(scores)
    base = np.ones(n, dtype=np.int64)
    rest = total - n
    quota = rest * scores / scores.sum()
    counts = base + np.floor(quota).astype(np.int64)
    remainder = total - counts.sum()
    order = np.argsort(-(quota - np.floor(quota)), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def _perp_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def save_body_model(model: BodyModel, path) -> None:
    """Binary container: magic, version, V/J/B (u32 LE), then f32 arrays in
    field order (parents stored as f32 with -1 for the root)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(
            struct.pack(
                "<IIII", FORMAT_VERSION, model.num_vertices, model.num_joints, model.num_betas
            )
        )
        for arr in (
            model.template_vertices,
            model.shape_blendshapes,
            model.skinning_weights,
            model.joint_regressor,
            model.parents,
        ):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_body_model(path) -> BodyModel:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a body model container (bad magic)")
        version, V, J, B = struct.unpack("<IIII", f.read(16))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")

        def read(shape):
            n = int(np.prod(shape))
            buf = f.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"{path}: truncated container")
            return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float64)

        template = read((V, 3))
        blend = read((V, 3, B))
        weights = read((V, J))
        regressor = read((J, V))
        parents = read((J,)).astype(np.int64)
    return BodyModel(template, blend, weights, regressor, parents)
