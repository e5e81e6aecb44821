import numpy as np
import pytest
import torch

from splatbody.body import (
    BodyModel,
    PoseParams,
    ShapeParams,
    SyntheticBodyConfig,
    build_synthetic_model,
    forward_lbs,
    lbs,
    load_body_model,
    save_body_model,
)
from splatbody.rotations import axis_angle_to_matrix, rotation_6d_to_matrix


def identity_pose(J=24, dtype=torch.float64):
    return PoseParams.identity(J, dtype=dtype)


def test_identity_pose_returns_template(toy_model):
    verts, joints = forward_lbs(
        toy_model, identity_pose(), ShapeParams.zeros(3, dtype=torch.float64)
    )
    np.testing.assert_allclose(verts.numpy(), toy_model.template_vertices, atol=1e-12)
    np.testing.assert_allclose(joints.numpy(), toy_model.rest_joints(), atol=1e-12)


def test_global_rotation_equivariance(toy_model):
    R = axis_angle_to_matrix(torch.tensor([0.0, 0.0, np.pi / 2], dtype=torch.float64))
    rots = torch.eye(3, dtype=torch.float64).repeat(24, 1, 1)
    rots[0] = R
    t = torch.tensor([0.3, -0.2, 0.5], dtype=torch.float64)
    verts, _ = forward_lbs(toy_model, PoseParams(rots, t), ShapeParams.zeros(3, dtype=torch.float64))

    root = toy_model.rest_joints()[0]
    expected = (toy_model.template_vertices - root) @ R.numpy().T + root + t.numpy()
    np.testing.assert_allclose(verts.numpy(), expected, atol=1e-5)


def test_two_joint_hand_oracle():
    # Vertex at (1,0,0) fully bound to a joint at the origin; rotating that
    # joint 90 degrees about z must carry the vertex to (0,1,0).
    template = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    weights = np.array([[0.0, 1.0], [1.0, 0.0]])
    regressor = np.full((2, 2), 0.5)  # both joints regress to the origin
    blend = np.zeros((2, 3, 1))
    model = BodyModel(template, blend, weights, regressor, np.array([-1, 0]))

    rots = torch.eye(3, dtype=torch.float64).repeat(2, 1, 1)
    rots[1] = axis_angle_to_matrix(torch.tensor([0.0, 0.0, np.pi / 2], dtype=torch.float64))
    verts, _ = forward_lbs(
        model, PoseParams(rots, torch.zeros(3, dtype=torch.float64)),
        ShapeParams.zeros(1, dtype=torch.float64),
    )
    np.testing.assert_allclose(verts[0].numpy(), [0.0, 1.0, 0.0], atol=1e-12)


def test_synthetic_model_deterministic():
    a = build_synthetic_model(SyntheticBodyConfig(num_vertices=312, num_betas=2, seed=7))
    b = build_synthetic_model(SyntheticBodyConfig(num_vertices=312, num_betas=2, seed=7))
    for f in ("template_vertices", "shape_blendshapes", "skinning_weights",
              "joint_regressor", "parents"):
        assert np.array_equal(getattr(a, f), getattr(b, f)), f


def test_synthetic_model_invariants():
    m = build_synthetic_model(SyntheticBodyConfig(num_vertices=312, num_betas=2, seed=7))
    np.testing.assert_allclose(m.skinning_weights.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(m.joint_regressor.sum(axis=1), 1.0, atol=1e-6)
    assert (m.skinning_weights >= 0).all()
    verts, _ = forward_lbs(m, identity_pose(), ShapeParams.zeros(2, dtype=torch.float64))
    np.testing.assert_allclose(verts.numpy(), m.template_vertices, atol=1e-12)


def test_synthetic_model_too_few_vertices():
    with pytest.raises(ValueError, match="not representable"):
        build_synthetic_model(SyntheticBodyConfig(num_vertices=10))


def test_joint_regression_linearity(toy_model):
    reg = toy_model.joint_regressor
    rng = np.random.default_rng(0)
    v1 = rng.normal(size=toy_model.template_vertices.shape)
    v2 = rng.normal(size=v1.shape)
    c1, c2 = 0.7, -1.3
    np.testing.assert_allclose(
        reg @ (c1 * v1 + c2 * v2), c1 * (reg @ v1) + c2 * (reg @ v2), atol=1e-12
    )


def test_lbs_gradients_match_finite_differences(toy_model):
    rng = np.random.default_rng(3)
    parts = [
        torch.as_tensor(toy_model.template_vertices),
        torch.as_tensor(toy_model.shape_blendshapes),
        torch.as_tensor(toy_model.joint_regressor),
        torch.as_tensor(toy_model.skinning_weights),
    ]
    rots = rotation_6d_to_matrix(torch.as_tensor(rng.normal(size=(24, 6))))
    betas = torch.as_tensor(rng.normal(size=3) * 0.5)
    trans = torch.as_tensor(rng.normal(size=3) * 0.1)
    w = torch.as_tensor(rng.normal(size=toy_model.template_vertices.shape))

    def f(r, b, t):
        verts, _ = lbs(*parts, toy_model.parents, r, b, t)
        return (verts * w).sum()

    leaves = [x.clone().requires_grad_(True) for x in (rots, betas, trans)]
    f(*leaves).backward()

    h = 1e-4
    for leaf in leaves:
        base = leaf.detach().clone()
        fd = np.zeros(base.numel())
        for i in range(base.numel()):
            hi, lo = base.clone(), base.clone()
            hi.view(-1)[i] += h
            lo.view(-1)[i] -= h
            args_hi = [x.detach() if x is not leaf else hi for x in leaves]
            args_lo = [x.detach() if x is not leaf else lo for x in leaves]
            fd[i] = (float(f(*args_hi)) - float(f(*args_lo))) / (2 * h)
        a = leaf.grad.numpy().ravel()
        denom = np.maximum(np.abs(a) + np.abs(fd), 1e-3 * np.abs(a).max())
        assert (np.abs(a - fd) / denom).max() < 1e-3


def test_pose_validation_rejects_non_rotation():
    rots = torch.eye(3, dtype=torch.float64).repeat(24, 1, 1)
    rots[5, 0, 0] = 1.5
    with pytest.raises(ValueError, match="non-rotation"):
        PoseParams(rots, torch.zeros(3, dtype=torch.float64))


def test_shape_validation():
    with pytest.raises(ValueError, match="beta"):
        ShapeParams(torch.tensor([0.0, 42.0]))
    with pytest.raises(ValueError, match="finite"):
        ShapeParams(torch.tensor([float("nan")]))


def test_dimension_mismatch_errors(toy_model):
    with pytest.raises(ValueError, match="joints"):
        forward_lbs(toy_model, PoseParams.identity(12), ShapeParams.zeros(3))
    with pytest.raises(ValueError, match="betas"):
        forward_lbs(toy_model, PoseParams.identity(24), ShapeParams.zeros(7))


def test_container_roundtrip(tmp_path, toy_model):
    path = tmp_path / "model.gstb"
    save_body_model(toy_model, path)
    loaded = load_body_model(path)
    for f in ("template_vertices", "shape_blendshapes", "skinning_weights", "joint_regressor"):
        np.testing.assert_allclose(
            getattr(loaded, f), getattr(toy_model, f).astype(np.float32), atol=0
        )
    assert np.array_equal(loaded.parents, toy_model.parents)


def test_container_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.gstb"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(ValueError, match="magic"):
        load_body_model(path)


def test_bodymodel_invariant_checks(toy_model):
    bad = toy_model.skinning_weights.copy()
    bad[0] *= 2
    with pytest.raises(ValueError, match="sum to 1"):
        BodyModel(
            toy_model.template_vertices, toy_model.shape_blendshapes, bad,
            toy_model.joint_regressor, toy_model.parents,
        )
