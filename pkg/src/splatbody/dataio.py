"""Synthetic multi-view scene generation and the on-disk scene format.

A scene directory holds cameras.json, view_%03d.png (RGBA), mask_%03d.png,
params.json and the body-model container it references; see FORMATS.md for
the field-level layout. Generated scenes store the exact ground-truth
parameters that produced them, so re-rendering reproduces the stored images
bit for bit after quantization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .body import (
    BodyModel,
    PoseParams,
    ShapeParams,
    forward_lbs,
    load_body_model,
    save_body_model,
)
from .camera import Camera, RigConfig, ring_cameras
from .gaussians import GaussianAttributes, ScaffoldConfig, init_attributes, scaffold
from .rasterizer import render_arrays
from .rotations import axis_angle_to_matrix

BODY_MODEL_FILENAME = "body_model.gstb"


@dataclass
class GroundTruth:
    pose: PoseParams
    shape: ShapeParams
    attributes: GaussianAttributes
    scaffold_cfg: ScaffoldConfig = field(default_factory=ScaffoldConfig)


@dataclass
class SceneView:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1] (8-bit quantized values)
    alpha: np.ndarray  # [H, W] float32 in [0, 1] (8-bit quantized values)
    mask: np.ndarray   # [H, W] float32 in {0, 1}
    camera: Camera


@dataclass
class SceneDataset:
    views: list[SceneView]
    body_model: BodyModel
    body_model_ref: str = BODY_MODEL_FILENAME
    gt: GroundTruth | None = None

    @property
    def num_views(self) -> int:
        return len(self.views)

    def __post_init__(self):
        if not self.views:
            raise ValueError("a scene needs at least one view")
        res = {(v.image.shape[0], v.image.shape[1]) for v in self.views}
        if len(res) != 1:
            raise ValueError(f"all views must share one resolution, got {res}")
        for v in self.views:
            if not np.isfinite(v.camera.world_to_camera).all():
                raise ValueError("camera contains non-finite values")

    def targets(self, dtype=torch.float32) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return [
            (torch.as_tensor(v.image, dtype=dtype), torch.as_tensor(v.mask, dtype=dtype))
            for v in self.views
        ]

    def cameras(self) -> list[Camera]:
        return [v.camera for v in self.views]


def quantize_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


@dataclass
class SceneConfig:
    rig: RigConfig = field(default_factory=RigConfig)
    joint_limit_deg: float = 25.0
    root_yaw_deg: float = 180.0        # global orientation range (+/- half)
    root_shift: float = 0.05           # meters, uniform cube
    beta_scale: float = 0.5
    offset_bound: float = 0.02         # meters; appearance offsets stay within
    color_waves: int = 4
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


def sample_pose(model: BodyModel, seed: int, cfg: SceneConfig) -> tuple[PoseParams, ShapeParams]:
    rng = np.random.default_rng(seed)
    J = model.num_joints
    axes = rng.normal(size=(J, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(0.0, np.deg2rad(cfg.joint_limit_deg), size=J)
    aa = axes * angles[:, None]
    # Global orientation: yaw about the vertical, wider than the limb limits.
    aa[0] = np.array([0.0, 1.0, 0.0]) * rng.uniform(
        -np.deg2rad(cfg.root_yaw_deg) / 2, np.deg2rad(cfg.root_yaw_deg) / 2
    )
    rots = axis_angle_to_matrix(torch.as_tensor(aa, dtype=torch.float32))
    trans = torch.as_tensor(
        rng.uniform(-cfg.root_shift, cfg.root_shift, size=3), dtype=torch.float32
    )
    betas = torch.as_tensor(
        rng.uniform(-1.0, 1.0, size=model.num_betas) * cfg.beta_scale, dtype=torch.float32
    )
    return PoseParams(rots, trans), ShapeParams(betas)


def _smooth_field(rng: np.random.Generator, points: np.ndarray, channels: int, waves: int):
    """Sum of low-frequency sinusoids over 3D positions -> [V, channels]."""
    out = np.zeros((points.shape[0], channels))
    for _ in range(waves):
        freq = rng.uniform(0.5, 2.5, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=channels)
        amp = rng.normal(0, 0.5, size=channels)
        arg = points @ freq
        out += amp * np.sin(2 * np.pi * arg[:, None] + phase)
    return out


def sample_appearance(
    model: BodyModel, seed: int, cfg: SceneConfig, scaffold_cfg: ScaffoldConfig | None = None
) -> GaussianAttributes:
    """Smooth vertex colors and bounded offsets, cloth-like, seeded."""
    scaffold_cfg = scaffold_cfg or ScaffoldConfig()
    rng = np.random.default_rng(seed)
    template = torch.as_tensor(model.template_vertices, dtype=torch.float32)
    attrs = init_attributes(template, scaffold_cfg.gaussians_per_vertex)
    anchors = (
        model.template_vertices
        if scaffold_cfg.gaussians_per_vertex == 1
        else np.repeat(model.template_vertices, scaffold_cfg.gaussians_per_vertex, axis=0)
    )

    colors = _smooth_field(rng, anchors, 3, cfg.color_waves)
    attrs.colors_raw = torch.as_tensor(np.clip(colors, -2.0, 2.0), dtype=torch.float32)

    offsets = 0.01 * _smooth_field(rng, anchors, 3, cfg.color_waves)
    norms = np.linalg.norm(offsets, axis=1, keepdims=True)
    offsets *= np.minimum(1.0, cfg.offset_bound / np.maximum(norms, 1e-9))
    attrs.offsets = torch.as_tensor(offsets, dtype=torch.float32)

    attrs.log_scales = attrs.log_scales + torch.as_tensor(
        0.15 * _smooth_field(rng, anchors, 3, 2), dtype=torch.float32
    )
    return attrs


def generate_scene(
    model: BodyModel,
    pose_seed: int,
    rig: RigConfig | SceneConfig,
    appearance_seed: int,
    threads: int = 1,
    scaffold_cfg: ScaffoldConfig | None = None,
) -> SceneDataset:
    """Sample a posed, textured body and render it from a camera ring.

    Deterministic per (pose_seed, appearance_seed). Images and alphas are
    stored already 8-bit quantized; masks are quantized alpha >= 128.
    `scaffold_cfg` selects the 2-3 splats-per-vertex / pinned-opacity
    variants.
    """
    cfg = rig if isinstance(rig, SceneConfig) else SceneConfig(rig=rig)
    scaffold_cfg = scaffold_cfg or ScaffoldConfig()
    pose, shape = sample_pose(model, pose_seed, cfg)
    attrs = sample_appearance(model, appearance_seed, cfg, scaffold_cfg)
    gt = GroundTruth(pose, shape, attrs, scaffold_cfg)
    views = render_views(model, gt, cfg, threads)
    return SceneDataset(views=views, body_model=model, gt=gt)


def render_views(
    model: BodyModel, gt: GroundTruth, cfg: SceneConfig, threads: int = 1
) -> list[SceneView]:
    with torch.no_grad():
        verts, joints = forward_lbs(model, gt.pose, gt.shape)
        gset = scaffold(verts, gt.attributes, gt.scaffold_cfg)
    cams = ring_cameras(cfg.rig, joints[0].numpy())
    bg = np.asarray(cfg.background, dtype=np.float32)
    views = []
    for cam in cams:
        rgb, alpha = render_arrays(gset, cam, bg, threads=threads)
        rgb_q = quantize_u8(rgb)
        alpha_q = quantize_u8(alpha)
        views.append(
            SceneView(
                image=(rgb_q.astype(np.float32) / 255.0),
                alpha=(alpha_q.astype(np.float32) / 255.0),
                mask=(alpha_q >= 128).astype(np.float32),
                camera=cam,
            )
        )
    return views


# ---------------------------------------------------------------------------
# On-disk format


def save_scene(ds: SceneDataset, scene_dir) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    cams = []
    for i, v in enumerate(ds.views):
        rgba = np.dstack([quantize_u8(v.image), quantize_u8(v.alpha)])
        Image.fromarray(rgba, mode="RGBA").save(scene_dir / f"view_{i:03d}.png")
        Image.fromarray(quantize_u8(v.mask), mode="L").save(scene_dir / f"mask_{i:03d}.png")
        c = v.camera
        cams.append(
            {
                "world_to_camera": c.world_to_camera.tolist(),
                "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                "width": c.width, "height": c.height, "near": c.near,
            }
        )
    (scene_dir / "cameras.json").write_text(json.dumps({"views": cams}, indent=1))
    save_body_model(ds.body_model, scene_dir / ds.body_model_ref)
    payload = {"body_model": ds.body_model_ref}
    if ds.gt is not None:
        payload.update(params_to_dict(ds.gt.pose, ds.gt.shape, ds.gt.attributes, ds.gt.scaffold_cfg))
    (scene_dir / "params.json").write_text(json.dumps(payload))


def load_scene(scene_dir) -> SceneDataset:
    scene_dir = Path(scene_dir)
    cam_path = scene_dir / "cameras.json"
    if not cam_path.exists():
        raise FileNotFoundError(f"{cam_path}: scene is missing cameras.json")
    cam_spec = json.loads(cam_path.read_text())
    views = []
    for i, c in enumerate(cam_spec["views"]):
        cam = Camera(
            np.asarray(c["world_to_camera"], dtype=np.float64),
            fx=float(c["fx"]), fy=float(c["fy"]), cx=float(c["cx"]), cy=float(c["cy"]),
            width=int(c["width"]), height=int(c["height"]), near=float(c.get("near", 0.05)),
        )
        img_path = scene_dir / f"view_{i:03d}.png"
        mask_path = scene_dir / f"mask_{i:03d}.png"
        if not img_path.exists():
            raise FileNotFoundError(f"view {i}: image file missing: {img_path}")
        if not mask_path.exists():
            raise FileNotFoundError(f"view {i}: mask file missing: {mask_path}")
        raw = np.asarray(Image.open(img_path).convert("RGBA"), dtype=np.float32) / 255.0
        mask = (np.asarray(Image.open(mask_path).convert("L")) >= 128).astype(np.float32)
        views.append(SceneView(image=raw[..., :3], alpha=raw[..., 3], mask=mask, camera=cam))

    params_path = scene_dir / "params.json"
    gt = None
    body_ref = BODY_MODEL_FILENAME
    if params_path.exists():
        payload = json.loads(params_path.read_text())
        body_ref = payload.get("body_model", BODY_MODEL_FILENAME)
        if "pose" in payload:
            gt = gt_from_dict(payload)
    model_path = scene_dir / body_ref
    if not model_path.exists():
        raise FileNotFoundError(f"referenced body model missing: {model_path}")
    model = load_body_model(model_path)
    return SceneDataset(views=views, body_model=model, body_model_ref=body_ref, gt=gt)


def _f32_list(t: torch.Tensor) -> list:
    return np.asarray(t.detach().cpu(), dtype=np.float32).tolist()


def params_to_dict(
    pose: PoseParams,
    shape: ShapeParams,
    attrs: GaussianAttributes | None = None,
    scaffold_cfg: ScaffoldConfig | None = None,
) -> dict:
    out = {
        "pose": {
            "joint_rotations": _f32_list(pose.joint_rotations),
            "root_translation": _f32_list(pose.root_translation),
        },
        "betas": _f32_list(shape.betas),
    }
    if attrs is not None:
        out["attributes"] = {
            "offsets": _f32_list(attrs.offsets),
            "rotations": _f32_list(attrs.rotations),
            "log_scales": _f32_list(attrs.log_scales),
            "opacity_logits": _f32_list(attrs.opacity_logits),
            "colors_raw": _f32_list(attrs.colors_raw),
        }
    if scaffold_cfg is not None:
        out["scaffold"] = {
            "gaussians_per_vertex": scaffold_cfg.gaussians_per_vertex,
            "fixed_opacity_one": scaffold_cfg.fixed_opacity_one,
        }
    return out


def gt_from_dict(payload: dict, dtype=torch.float32) -> GroundTruth:
    def t(x):
        return torch.as_tensor(np.asarray(x, dtype=np.float32), dtype=dtype)

    pose = PoseParams(t(payload["pose"]["joint_rotations"]), t(payload["pose"]["root_translation"]))
    shape = ShapeParams(t(payload["betas"]))
    a = payload["attributes"]
    attrs = GaussianAttributes(
        t(a["offsets"]), t(a["rotations"]), t(a["log_scales"]),
        t(a["opacity_logits"]), t(a["colors_raw"]),
    )
    sc = payload.get("scaffold", {})
    cfg = ScaffoldConfig(
        gaussians_per_vertex=int(sc.get("gaussians_per_vertex", 1)),
        fixed_opacity_one=bool(sc.get("fixed_opacity_one", False)),
    )
    return GroundTruth(pose, shape, attrs, cfg)
