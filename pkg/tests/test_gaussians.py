import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from splatbody.gaussians import (
    GaussianAttributes,
    ScaffoldConfig,
    export_ply,
    init_attributes,
    scaffold,
    tightness,
)


def make_attrs(n, rng, offset_scale=0.02):
    return GaussianAttributes(
        offsets=torch.as_tensor(rng.normal(0, offset_scale, (n, 3))),
        rotations=torch.as_tensor(rng.normal(size=(n, 4))),
        log_scales=torch.as_tensor(rng.uniform(-5, -1, (n, 3))),
        opacity_logits=torch.as_tensor(rng.normal(size=(n, 1))),
        colors_raw=torch.as_tensor(rng.normal(size=(n, 3))),
    )


def test_zero_offsets_means_equal_vertices():
    verts = torch.as_tensor(np.random.default_rng(0).normal(size=(12, 3)))
    gset = scaffold(verts, init_attributes(verts))
    assert torch.equal(gset.means, verts)


def test_identity_quaternion_diagonal_covariance():
    verts = torch.zeros(1, 3, dtype=torch.float64)
    attrs = init_attributes(verts)
    attrs.log_scales = torch.log(torch.tensor([[0.1, 0.2, 0.3]], dtype=torch.float64))
    gset = scaffold(verts, attrs)
    np.testing.assert_allclose(
        gset.covariances[0].numpy(), np.diag([0.01, 0.04, 0.09]), atol=1e-12
    )


def test_rotated_covariance_matches_independent_product():
    # 90 degrees about z with scales (1, 2, 3): expect diag(4, 1, 9). The
    # expected matrix is recomputed here with scipy as an independent route;
    # the wide clamp admits the meter-scale test scales.
    from scipy.spatial.transform import Rotation

    verts = torch.zeros(1, 3, dtype=torch.float64)
    attrs = init_attributes(verts)
    attrs.log_scales = torch.log(torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64))
    q = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])  # (w,x,y,z)
    attrs.rotations = torch.as_tensor(q[None])
    cfg = ScaffoldConfig(scale_max=10.0)
    gset = scaffold(verts, attrs, cfg)

    R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    expected = R @ np.diag([1.0, 4.0, 9.0]) @ R.T
    np.testing.assert_allclose(gset.covariances[0].numpy(), expected, atol=1e-12)
    np.testing.assert_allclose(gset.covariances[0].numpy(), np.diag([4.0, 1.0, 9.0]), atol=1e-12)


def test_scale_clamp_defaults():
    verts = torch.zeros(1, 3, dtype=torch.float64)
    attrs = init_attributes(verts)
    attrs.log_scales = torch.tensor([[np.log(2.0), np.log(1e-6), np.log(0.1)]])
    gset = scaffold(verts, attrs)
    s = np.sqrt(np.diag(gset.covariances[0].numpy()))
    np.testing.assert_allclose(s, [0.5, 1e-4, 0.1], rtol=1e-5)


def test_covariances_psd_random():
    rng = np.random.default_rng(5)
    attrs = make_attrs(10_000, rng, offset_scale=0.1)
    verts = torch.zeros(10_000, 3, dtype=torch.float64)
    gset = scaffold(verts, attrs)
    eig = np.linalg.eigvalsh(gset.covariances.numpy())
    assert eig.min() >= -1e-9


def test_quaternion_sign_invariance_bitwise():
    rng = np.random.default_rng(7)
    verts = torch.zeros(64, 3, dtype=torch.float64)
    attrs = make_attrs(64, rng)
    neg = GaussianAttributes(
        attrs.offsets, -attrs.rotations, attrs.log_scales,
        attrs.opacity_logits, attrs.colors_raw,
    )
    assert torch.equal(scaffold(verts, attrs).covariances, scaffold(verts, neg).covariances)


def test_zero_norm_quaternion_rejected():
    verts = torch.zeros(1, 3, dtype=torch.float64)
    attrs = init_attributes(verts)
    attrs.rotations = torch.zeros(1, 4, dtype=torch.float64)
    with pytest.raises(ValueError, match="quaternion"):
        scaffold(verts, attrs)


def test_nonfinite_vertices_rejected():
    verts = torch.full((2, 3), float("inf"))
    with pytest.raises(ValueError, match="finite"):
        scaffold(verts, init_attributes(torch.zeros(2, 3)))


def test_gaussians_per_vertex_grouping():
    verts = torch.as_tensor(np.random.default_rng(0).normal(size=(5, 3)))
    cfg = ScaffoldConfig(gaussians_per_vertex=2)
    attrs = init_attributes(verts, gaussians_per_vertex=2)
    gset = scaffold(verts, attrs, cfg)
    assert gset.count == 10
    assert torch.equal(gset.means[::2], verts)
    assert torch.equal(gset.means[1::2], verts)
    with pytest.raises(ValueError, match="attribute rows"):
        scaffold(verts, init_attributes(verts, 1), cfg)


def test_fixed_opacity_one():
    verts = torch.zeros(3, 3, dtype=torch.float64)
    attrs = init_attributes(verts)
    gset = scaffold(verts, attrs, ScaffoldConfig(fixed_opacity_one=True))
    assert torch.equal(gset.opacities, torch.ones(3, dtype=torch.float64))


def test_offset_locality():
    # Moving one vertex moves exactly its Gaussian, by exactly that amount.
    rng = np.random.default_rng(2)
    verts = torch.as_tensor(rng.normal(size=(8, 3)))
    attrs = make_attrs(8, rng)
    base = scaffold(verts, attrs).means
    shifted = verts.clone()
    delta = torch.tensor([0.1, -0.2, 0.05], dtype=torch.float64)
    shifted[3] += delta
    moved = scaffold(shifted, attrs).means
    np.testing.assert_allclose((moved[3] - base[3]).numpy(), delta.numpy(), atol=1e-15)
    mask = torch.ones(8, dtype=torch.bool)
    mask[3] = False
    assert torch.equal(moved[mask], base[mask])


def test_tightness_examples():
    offsets = torch.tensor([[3.0, 0, 0], [0, 4.0, 0]], dtype=torch.float64)
    attrs = GaussianAttributes(
        offsets, torch.tensor([[1.0, 0, 0, 0]] * 2, dtype=torch.float64),
        torch.zeros(2, 3, dtype=torch.float64), torch.zeros(2, 1, dtype=torch.float64),
        torch.zeros(2, 3, dtype=torch.float64),
    )
    assert float(tightness(attrs)) == pytest.approx(3.5, abs=1e-12)

    zero = GaussianAttributes(
        torch.zeros(2, 3), attrs.rotations.float(), torch.zeros(2, 3),
        torch.zeros(2, 1), torch.zeros(2, 3),
    )
    assert float(tightness(zero)) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=0.0, max_value=100.0), st.integers(min_value=0, max_value=2**31 - 1))
def test_tightness_positive_homogeneity(s, seed):
    rng = np.random.default_rng(seed)
    offsets = torch.as_tensor(rng.normal(size=(6, 3)))
    base = GaussianAttributes(
        offsets, torch.tensor([[1.0, 0, 0, 0]] * 6, dtype=torch.float64),
        torch.zeros(6, 3, dtype=torch.float64), torch.zeros(6, 1, dtype=torch.float64),
        torch.zeros(6, 3, dtype=torch.float64),
    )
    scaled = GaussianAttributes(
        s * offsets, base.rotations, base.log_scales, base.opacity_logits, base.colors_raw
    )
    assert float(tightness(scaled)) == pytest.approx(s * float(tightness(base)), rel=1e-9)


def test_tightness_gradient_spec_formula():
    offsets = torch.tensor(
        [[0.3, -0.4, 0.0], [0.0, 0.0, 0.0]], dtype=torch.float64, requires_grad=True
    )
    attrs = GaussianAttributes(
        offsets, torch.tensor([[1.0, 0, 0, 0]] * 2, dtype=torch.float64),
        torch.zeros(2, 3, dtype=torch.float64), torch.zeros(2, 1, dtype=torch.float64),
        torch.zeros(2, 3, dtype=torch.float64),
    )
    tightness(attrs).backward()
    expected_row0 = offsets[0].detach() / (2 * 0.5)  # delta / (N * |delta|)
    np.testing.assert_allclose(offsets.grad[0].numpy(), expected_row0.numpy(), atol=1e-12)
    np.testing.assert_allclose(offsets.grad[1].numpy(), np.zeros(3), atol=0)


def test_ply_export_field_names(tmp_path):
    rng = np.random.default_rng(0)
    verts = torch.as_tensor(rng.normal(size=(6, 3)))
    gset = scaffold(verts, make_attrs(6, rng))
    path = tmp_path / "splats.ply"
    export_ply(gset, path)
    header = path.read_bytes().split(b"end_header")[0].decode()
    for name in ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                 "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"):
        assert f"property float {name}" in header
    assert "element vertex 6" in header
