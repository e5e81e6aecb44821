"""Grouped-token transformer: one image -> body parameters + Gaussian attributes.

Patch tokens feed a small pre-norm encoder; a fixed set of 5K+1 learned
queries (one body-parameter token plus five parameter-type tokens per vertex
group) cross-attends to the image tokens, and per-type linear heads decode
each group token into its group's raw Gaussian attributes. Desk-scale by
design: the mechanism under test is the grouped decoding and the joint
body+appearance prediction, not capacity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .body import BodyModel, PoseParams, ShapeParams, lbs
from .dataio import SceneDataset
from .gaussians import GaussianAttributes, ScaffoldConfig, scaffold
from .losses import LossReport, LossWeights, image_loss, total_loss
from .rasterizer import render
from .rotations import rotation_6d_to_matrix

PARAM_TYPES = ("rotation", "offset", "scale", "color", "opacity")
PARAM_DIMS = {"rotation": 4, "offset": 3, "scale": 3, "color": 3, "opacity": 1}

CKPT_MAGIC = b"GSTP"
CKPT_VERSION = 1


@dataclass
class PredictorConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    encoder_layers: int = 4
    decoder_layers: int = 2
    heads: int = 4
    groups: int = 26        # K
    group_size: int = 265   # vertices per group; K * group_size = V
    num_betas: int = 10
    init_log_scale: float = -3.7

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def num_vertices(self) -> int:
        return self.groups * self.group_size

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_queries(self) -> int:
        return 5 * self.groups + 1


@dataclass
class QueryTokens:
    """View over the learned query table: body token + K x 5 type tokens."""

    smpl_token: Tensor   # [1, d]
    group_tokens: Tensor  # [K, 5, d]

    @property
    def count(self) -> int:
        return self.smpl_token.shape[0] + self.group_tokens.shape[0] * self.group_tokens.shape[1]


@dataclass
class PredictorOutput:
    rotations6d: Tensor      # [24, 6]
    root_translation: Tensor  # [3]
    betas: Tensor            # [B]
    weak_perspective: Tensor  # [3] (scale, tx, ty) placement fallback
    attrs: GaussianAttributes

    def pose(self) -> PoseParams:
        return PoseParams(rotation_6d_to_matrix(self.rotations6d), self.root_translation)

    def shape(self) -> ShapeParams:
        return ShapeParams(torch.clamp(self.betas, -ShapeParams.MAX_ABS, ShapeParams.MAX_ABS))


class _EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class _CrossBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )

    def forward(self, q, kv):
        k = self.norm_kv(kv)
        q = q + self.attn(self.norm_q(q), k, k, need_weights=False)[0]
        return q + self.mlp(self.norm2(q))


class GroupedTokenPredictor(nn.Module):
    def __init__(self, config: PredictorConfig):
        super().__init__()
        self.config = config
        d, p = config.embed_dim, config.patch_size

        self.patch_embed = nn.Linear(p * p * 3, d)
        self.pos_embed = nn.Parameter(torch.randn(config.num_patches, d) * 0.02)
        self.encoder = nn.ModuleList(
            _EncoderBlock(d, config.heads) for _ in range(config.encoder_layers)
        )
        self.encoder_norm = nn.LayerNorm(d)

        self.queries = nn.Parameter(torch.randn(config.num_queries, d) * 0.02)
        self.decoder = nn.ModuleList(
            _CrossBlock(d, config.heads) for _ in range(config.decoder_layers)
        )
        self.decoder_norm = nn.LayerNorm(d)

        smpl_out = 24 * 6 + config.num_betas + 3 + 3
        self.smpl_head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, smpl_out))
        self.type_heads = nn.ModuleDict(
            {
                name: nn.Linear(d, config.group_size * PARAM_DIMS[name])
                for name in PARAM_TYPES
            }
        )
        self._init_output_heads()

    def _init_output_heads(self):
        """Zero-weight output layers with biases at the on-surface defaults,
        so an untrained model predicts the rest body exactly."""
        cfg = self.config
        final = self.smpl_head[-1]
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
        ident6d = torch.tensor([1.0, 0, 0, 0, 1.0, 0]).repeat(24)
        with torch.no_grad():
            final.bias[: 24 * 6] = ident6d
            final.bias[24 * 6 + cfg.num_betas + 3] = 1.0  # weak-perspective scale
        biases = {
            "rotation": torch.tensor([1.0, 0, 0, 0]),
            "offset": torch.zeros(3),
            "scale": torch.full((3,), cfg.init_log_scale),
            "color": torch.zeros(3),
            "opacity": torch.tensor([float(np.log(0.9 / 0.1))]),
        }
        for name, head in self.type_heads.items():
            nn.init.zeros_(head.weight)
            with torch.no_grad():
                head.bias.copy_(biases[name].repeat(cfg.group_size))

    def query_tokens(self) -> QueryTokens:
        cfg = self.config
        return QueryTokens(
            smpl_token=self.queries[:1],
            group_tokens=self.queries[1:].reshape(cfg.groups, 5, cfg.embed_dim),
        )

    def encode(self, image: Tensor) -> Tensor:
        """[H, W, 3] image -> [HW/p^2, d] tokens."""
        cfg = self.config
        h, w = image.shape[0], image.shape[1]
        if h != cfg.image_size or w != cfg.image_size or image.shape[2] != 3:
            raise ValueError(
                f"expected {cfg.image_size}x{cfg.image_size}x3 image, got {tuple(image.shape)}"
            )
        p = cfg.patch_size
        patches = (
            image.reshape(h // p, p, w // p, p, 3)
            .permute(0, 2, 1, 3, 4)
            .reshape(cfg.num_patches, p * p * 3)
        )
        x = (self.patch_embed(patches) + self.pos_embed).unsqueeze(0)
        for block in self.encoder:
            x = block(x)
        return self.encoder_norm(x).squeeze(0)

    def decode(self, tokens: Tensor) -> PredictorOutput:
        """Image tokens -> raw body parameters and grouped attributes."""
        cfg = self.config
        if tokens.shape != (cfg.num_patches, cfg.embed_dim):
            raise ValueError(f"token tensor {tuple(tokens.shape)} does not match config")
        q = self.queries.unsqueeze(0)
        kv = tokens.unsqueeze(0)
        for block in self.decoder:
            q = block(q, kv)
        q = self.decoder_norm(q).squeeze(0)  # [5K+1, d]

        smpl_raw = self.smpl_head(q[0])
        rot6d = smpl_raw[: 24 * 6].reshape(24, 6)
        betas = smpl_raw[24 * 6 : 24 * 6 + cfg.num_betas]
        trans = smpl_raw[24 * 6 + cfg.num_betas : 24 * 6 + cfg.num_betas + 3]
        weak = smpl_raw[24 * 6 + cfg.num_betas + 3 :]

        group = q[1:].reshape(cfg.groups, 5, cfg.embed_dim)
        fields = {}
        for i, name in enumerate(PARAM_TYPES):
            out = self.type_heads[name](group[:, i, :])  # [K, gs*dim]
            fields[name] = out.reshape(cfg.num_vertices, PARAM_DIMS[name])
        attrs = GaussianAttributes(
            offsets=fields["offset"],
            rotations=fields["rotation"],
            log_scales=fields["scale"],
            opacity_logits=fields["opacity"],
            colors_raw=fields["color"],
        )
        return PredictorOutput(rot6d, trans, betas, weak, attrs)

    def forward(self, image: Tensor) -> PredictorOutput:
        return self.decode(self.encode(image))


@dataclass
class TrainState:
    model: GroupedTokenPredictor
    optimizer: torch.optim.Adam
    scaffold_cfg: ScaffoldConfig = field(default_factory=ScaffoldConfig)

    @classmethod
    def create(
        cls,
        config: PredictorConfig,
        lr: float = 1e-4,
        seed: int = 0,
        scaffold_cfg: ScaffoldConfig | None = None,
    ) -> "TrainState":
        torch.manual_seed(seed)
        model = GroupedTokenPredictor(config)
        opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999))
        return cls(model, opt, scaffold_cfg or ScaffoldConfig())


def predictor_forward_views(
    model: GroupedTokenPredictor,
    body: BodyModel,
    scene: SceneDataset,
    input_view: int,
    supervision_views: list[int],
    scaffold_cfg: ScaffoldConfig,
    threads: int = 1,
):
    """Encode one view, decode, skin, scaffold, render all supervision views."""
    dtype = torch.float32
    image = torch.as_tensor(scene.views[input_view].image, dtype=dtype)
    out = model(image)
    verts, joints = lbs(
        torch.as_tensor(body.template_vertices, dtype=dtype),
        torch.as_tensor(body.shape_blendshapes, dtype=dtype),
        torch.as_tensor(body.joint_regressor, dtype=dtype),
        torch.as_tensor(body.skinning_weights, dtype=dtype),
        body.parents,
        rotation_6d_to_matrix(out.rotations6d),
        out.betas,
        out.root_translation,
    )
    gset = scaffold(verts, out.attrs, scaffold_cfg)
    renders = [
        render(gset, scene.views[i].camera, threads=threads) for i in supervision_views
    ]
    return out, renders, joints


def train_step(
    state: TrainState,
    body: BodyModel,
    scene: SceneDataset,
    weights: LossWeights,
    input_view: int = 0,
    supervision_views: list[int] | None = None,
    threads: int = 1,
) -> LossReport:
    """One optimization step on one scene sample; returns the loss report."""
    if scene.num_views < 1:
        raise ValueError("scene must supply at least one supervision view")
    sup = supervision_views or list(range(scene.num_views))
    state.optimizer.zero_grad()
    out, renders, _ = predictor_forward_views(
        state.model, body, scene, input_view, sup, state.scaffold_cfg, threads
    )
    targets = [scene.targets()[i] for i in sup]
    report = total_loss(
        image_loss(renders, targets, weights), out.attrs, ShapeParams(out.betas), weights
    )
    if not torch.isfinite(report.total):
        bad = {k: v for k, v in report.scalars().items() if not np.isfinite(v)}
        raise RuntimeError(f"non-finite training loss: {bad or 'total'}")
    report.total.backward()
    state.optimizer.step()
    return report


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version u32, blob count u32, then per blob
# name length u32 + utf-8 name + ndim u32 + dims (u32 each) + f32 data.


def save_checkpoint(state: TrainState, path) -> None:
    blobs: list[tuple[str, np.ndarray]] = [
        ("__config__", _config_blob(state.model.config, state.scaffold_cfg))
    ]
    for name, tensor in state.model.state_dict().items():
        blobs.append((name, tensor.detach().cpu().numpy().astype(np.float32)))
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(blobs)))
        for name, arr in blobs:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a predictor checkpoint (bad magic)")
        version, count = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        blobs: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            blobs[name] = data
    config, scaffold_cfg = _config_from_blob(blobs.pop("__config__"))
    state = TrainState.create(config, scaffold_cfg=scaffold_cfg)
    state.model.load_state_dict(
        {k: torch.from_numpy(v.copy()) for k, v in blobs.items()}, strict=True
    )
    return state


def _config_blob(cfg: PredictorConfig, scfg: ScaffoldConfig) -> np.ndarray:
    return np.array(
        [
            cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.encoder_layers,
            cfg.decoder_layers, cfg.heads, cfg.groups, cfg.group_size,
            cfg.num_betas, cfg.init_log_scale,
            scfg.gaussians_per_vertex, float(scfg.fixed_opacity_one),
        ],
        dtype=np.float32,
    )


def _config_from_blob(blob: np.ndarray) -> tuple[PredictorConfig, ScaffoldConfig]:
    v = blob.astype(np.float64)
    cfg = PredictorConfig(
        image_size=int(v[0]), patch_size=int(v[1]), embed_dim=int(v[2]),
        encoder_layers=int(v[3]), decoder_layers=int(v[4]), heads=int(v[5]),
        groups=int(v[6]), group_size=int(v[7]), num_betas=int(v[8]),
        init_log_scale=float(v[9]),
    )
    scfg = ScaffoldConfig(
        gaussians_per_vertex=int(v[10]), fixed_opacity_one=bool(v[11])
    )
    return cfg, scfg
