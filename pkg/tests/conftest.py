import numpy as np
import pytest
import torch

from splatbody.body import SyntheticBodyConfig, build_synthetic_model
from splatbody.camera import RigConfig
from splatbody.dataio import SceneConfig, generate_scene


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def toy_model():
    return build_synthetic_model(SyntheticBodyConfig(num_vertices=60, num_betas=3, seed=1))


@pytest.fixture(scope="session")
def small_model():
    return build_synthetic_model(SyntheticBodyConfig(num_vertices=390, num_betas=4, seed=21))


@pytest.fixture(scope="session")
def small_scene(small_model):
    cfg = SceneConfig(rig=RigConfig(num_views=4, resolution=64, radius=2.4))
    return generate_scene(small_model, pose_seed=42, rig=cfg, appearance_seed=43)
