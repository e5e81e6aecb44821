"""splatbody: differentiable Gaussian splatting scaffolded on a skinned body.

Gaussians are anchored one-to-one (or 2-3:1) to vertices of a parametric
skinned body model; rendering, losses, per-scene fitting and a grouped-token
predictor all differentiate end to end through the analytic rasterizer.
"""

from .body import (
    BodyModel,
    PoseParams,
    ShapeParams,
    SyntheticBodyConfig,
    build_synthetic_model,
    forward_lbs,
    load_body_model,
    save_body_model,
)
from .camera import Camera, ImageBuffer, RigConfig, look_at, ring_cameras
from .gaussians import (
    GaussianAttributes,
    GaussianSet,
    ScaffoldConfig,
    export_ply,
    init_attributes,
    scaffold,
    tightness,
)

__version__ = "0.1.0"
