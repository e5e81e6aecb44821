import numpy as np
import pytest
import torch

from splatbody.camera import Camera, look_at
from splatbody.gaussians import GaussianSet
from splatbody.gradcheck import check_lbs, check_losses, check_rasterizer, check_scaffold
from splatbody.rasterizer import render, render_backward


def test_zero_upstream_gradients_give_zero(toy_model):
    rng = np.random.default_rng(0)
    n = 10
    gset = GaussianSet(
        torch.as_tensor(rng.normal(0, 0.4, (n, 3))),
        torch.as_tensor(np.stack([np.eye(3) * 0.02] * n)),
        torch.as_tensor(rng.uniform(0.2, 0.9, n)),
        torch.as_tensor(rng.uniform(0, 1, (n, 3))),
    )
    cam = Camera(look_at([0, 0, -3], [0, 0, 0]), fx=40, fy=40, cx=16, cy=16, width=32, height=32)
    g = render_backward(gset, cam, np.zeros(3), np.zeros((32, 32, 3)), np.zeros((32, 32)))
    assert g.means.max() == 0.0 and g.covariances.max() == 0.0
    assert g.opacities.max() == 0.0 and g.colors.max() == 0.0


def test_invisible_gaussians_get_zero_gradient():
    gset = GaussianSet(
        means=torch.tensor([[0, 0, 2.0], [0, 0, -5.0]], dtype=torch.float64),
        covariances=torch.eye(3, dtype=torch.float64)[None].repeat(2, 1, 1) * 0.01,
        opacities=torch.tensor([0.8, 0.8], dtype=torch.float64),
        colors=torch.tensor([[1.0, 0, 0], [0, 1.0, 0]], dtype=torch.float64),
    )
    cam = Camera(np.eye(4), fx=50, fy=50, cx=16.5, cy=16.5, width=32, height=32)
    rng = np.random.default_rng(1)
    g = render_backward(
        gset, cam, np.zeros(3), rng.normal(size=(32, 32, 3)), rng.normal(size=(32, 32))
    )
    assert np.abs(g.means[0]).max() > 0  # the visible one receives gradient
    assert np.abs(g.means[1]).max() == 0.0
    assert np.abs(g.covariances[1]).max() == 0.0
    assert g.opacities[1] == 0.0
    assert np.abs(g.colors[1]).max() == 0.0


def test_single_gaussian_color_gradient_closed_form():
    # Loss = red channel at the center pixel; dL/dc_red = w*T = alpha there.
    opacity = 0.73
    cam = Camera(np.eye(4), fx=50, fy=50, cx=16.5, cy=16.5, width=32, height=32)
    gset = GaussianSet(
        means=torch.tensor([[0, 0, 2.0]], dtype=torch.float64),
        covariances=torch.eye(3, dtype=torch.float64)[None] * 0.01,
        opacities=torch.tensor([opacity], dtype=torch.float64),
        colors=torch.tensor([[0.3, 0.2, 0.1]], dtype=torch.float64),
    )
    grad_rgb = np.zeros((32, 32, 3))
    grad_rgb[16, 16, 0] = 1.0
    g = render_backward(gset, cam, np.zeros(3), grad_rgb, np.zeros((32, 32)))
    assert g.colors[0, 0] == pytest.approx(opacity, rel=1e-12)
    assert g.colors[0, 1] == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_render_gradients_match_finite_differences(seed):
    report = check_rasterizer(seed, n_gaussians=12, size=24)
    for entry in report:
        assert entry["pass"], f"{entry['param']}: rel err {entry['max_rel_err']:.3e}"


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_scaffold_lbs_losses_gradients(seed):
    for entry in check_scaffold(seed) + check_lbs(seed) + check_losses(seed, n_probe=24):
        assert entry["pass"], f"{entry['param']}: rel err {entry['max_rel_err']:.3e}"


def test_torch_autograd_path_matches_explicit_adjoint():
    rng = np.random.default_rng(5)
    n = 15
    means = torch.as_tensor(rng.normal(0, 0.4, (n, 3)), dtype=torch.float64).requires_grad_(True)
    covs = torch.as_tensor(np.stack([np.eye(3) * s for s in rng.uniform(0.005, 0.05, n)])).requires_grad_(True)
    opac = torch.as_tensor(rng.uniform(0.2, 0.9, n)).requires_grad_(True)
    colors = torch.as_tensor(rng.uniform(0, 1, (n, 3))).requires_grad_(True)
    cam = Camera(look_at([0, 0, -3], [0, 0, 0]), fx=40, fy=40, cx=16, cy=16, width=32, height=32)
    w_rgb = torch.as_tensor(rng.normal(size=(32, 32, 3)))
    w_alpha = torch.as_tensor(rng.normal(size=(32, 32)))

    buf = render(GaussianSet(means, covs, opac, colors), cam)
    ((buf.rgb * w_rgb).sum() + (buf.alpha * w_alpha).sum()).backward()

    explicit = render_backward(
        GaussianSet(means.detach(), covs.detach(), opac.detach(), colors.detach()),
        cam, np.zeros(3), w_rgb.numpy(), w_alpha.numpy(),
    )
    np.testing.assert_allclose(means.grad.numpy(), explicit.means, atol=1e-12)
    np.testing.assert_allclose(covs.grad.numpy(), explicit.covariances, atol=1e-12)
    np.testing.assert_allclose(opac.grad.numpy(), explicit.opacities, atol=1e-12)
    np.testing.assert_allclose(colors.grad.numpy(), explicit.colors, atol=1e-12)


def test_backward_shape_mismatch_rejected():
    gset = GaussianSet(
        torch.zeros(1, 3, dtype=torch.float64) + torch.tensor([0, 0, 2.0]),
        torch.eye(3, dtype=torch.float64)[None] * 0.01,
        torch.tensor([0.5], dtype=torch.float64),
        torch.tensor([[1.0, 0, 0]], dtype=torch.float64),
    )
    cam = Camera(np.eye(4), fx=50, fy=50, cx=16, cy=16, width=32, height=32)
    with pytest.raises(ValueError, match="shape"):
        render_backward(gset, cam, np.zeros(3), np.zeros((16, 16, 3)), np.zeros((16, 16)))
