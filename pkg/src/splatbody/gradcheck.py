"""Finite-difference verification suites for every analytic gradient path.

Each suite builds a seeded random configuration in float64, computes analytic
gradients, re-derives them by central differences, and reports the worst
relative error per parameter group. Relative error uses a magnitude-aware
floor so near-zero gradient entries compare on the group's scale:

    rel = |a - f| / max(|a| + |f|, 1e-3 * max_entry(|a| + |f|), 1e-12)

Paths through the compositing cutoffs are allowed 1e-2 (the skip thresholds
create genuine kinks); smooth paths must reach 1e-3.
"""

from __future__ import annotations

import numpy as np
import torch

from .body import SyntheticBodyConfig, build_synthetic_model, lbs
from .camera import Camera, ImageBuffer, look_at
from .gaussians import GaussianAttributes, ScaffoldConfig, scaffold, tightness
from .losses import LossWeights, image_loss, total_loss
from .rasterizer import render_arrays, render_backward
from .gaussians import GaussianSet

SMOOTH_TOL = 1e-3
COMPOSITING_TOL = 1e-2


def relative_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    f = np.asarray(fd, dtype=np.float64).ravel()
    mag = np.abs(a) + np.abs(f)
    floor = max(1e-3 * mag.max(initial=0.0), 1e-12)
    return float((np.abs(a - f) / np.maximum(mag, floor)).max(initial=0.0))


def central_difference(f, x: torch.Tensor, h: float) -> np.ndarray:
    """Entry-wise central differences of a scalar function of one tensor."""
    base = x.detach().clone()
    out = np.zeros(base.numel())
    for i in range(base.numel()):
        hi = base.clone()
        hi.view(-1)[i] += h
        lo = base.clone()
        lo.view(-1)[i] -= h
        out[i] = (float(f(hi)) - float(f(lo))) / (2 * h)
    return out.reshape(tuple(base.shape))


def _entry(param: str, analytic, fd, tol: float) -> dict:
    err = relative_error(analytic, fd)
    return {"param": param, "max_rel_err": err, "tol": tol, "pass": bool(err < tol)}


def check_rasterizer(seed: int, n_gaussians: int = 25, size: int = 32, h: float = 1e-6) -> list[dict]:
    """Full render adjoint (means, covariances, opacities, colors) against
    central differences of a random linear image functional."""
    rng = np.random.default_rng(seed)
    cam = Camera(look_at([0, 0, -3.0], [0, 0, 0]), fx=40, fy=40,
                 cx=size / 2, cy=size / 2, width=size, height=size)
    means = rng.normal(0, 0.5, (n_gaussians, 3))
    quats = rng.normal(size=(n_gaussians, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    scales = np.exp(rng.uniform(np.log(0.05), np.log(0.3), (n_gaussians, 3)))
    R = _quat_mats(quats)
    covs = np.einsum("nij,nj,nkj->nik", R, scales**2, R)
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    opac = rng.uniform(0.2, 0.95, n_gaussians)
    colors = rng.uniform(0, 1, (n_gaussians, 3))
    bg = rng.uniform(0, 1, 3)
    g_rgb = rng.normal(size=(size, size, 3))
    g_alpha = rng.normal(size=(size, size))

    params = {"means": means, "covariances": covs, "opacities": opac, "colors": colors}

    def loss(p):
        gset = GaussianSet(*[torch.from_numpy(p[k]) for k in params])
        rgb, alpha = render_arrays(gset, cam, bg)
        return float((rgb * g_rgb).sum() + (alpha * g_alpha).sum())

    gset = GaussianSet(*[torch.from_numpy(params[k]) for k in params])
    grads = render_backward(gset, cam, bg, g_rgb, g_alpha)
    analytic = {
        "means": grads.means, "covariances": grads.covariances,
        "opacities": grads.opacities, "colors": grads.colors,
    }
    f0 = loss(params)
    report = []
    for key in params:
        a = np.asarray(analytic[key]).ravel()
        floor = max(1e-3 * (2 * np.abs(a)).max(initial=0.0), 1e-12)
        errs = np.zeros(params[key].size)
        for i in range(params[key].size):
            hi = {k: v.copy() for k, v in params.items()}
            hi[key].flat[i] += h
            lo = {k: v.copy() for k, v in params.items()}
            lo[key].flat[i] -= h
            f_hi, f_lo = loss(hi), loss(lo)
            central = (f_hi - f_lo) / (2 * h)
            err = abs(a[i] - central) / max(abs(a[i]) + abs(central), floor)
            if err >= COMPOSITING_TOL:
                # The compositing skip thresholds make the image piecewise
                # smooth; when the central stencil straddles a cutoff, one of
                # the one-sided slopes is still on the analytic branch.
                right = (f_hi - f0) / h
                left = (f0 - f_lo) / h
                err = min(
                    err,
                    abs(a[i] - right) / max(abs(a[i]) + abs(right), floor),
                    abs(a[i] - left) / max(abs(a[i]) + abs(left), floor),
                )
            errs[i] = err
        report.append(
            {
                "param": f"rasterizer.{key}",
                "max_rel_err": float(errs.max(initial=0.0)),
                "tol": COMPOSITING_TOL,
                "pass": bool(errs.max(initial=0.0) < COMPOSITING_TOL),
            }
        )
    return report


def _quat_mats(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q.T
    return np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    ).reshape(-1, 3, 3)


def check_scaffold(seed: int, n: int = 8, h: float = 1e-6) -> list[dict]:
    """Covariance/mean/activation gradients of the scaffold, plus the offset
    regularizer, against central differences (smooth paths)."""
    rng = np.random.default_rng(seed)
    verts = torch.from_numpy(rng.normal(0, 0.3, (n, 3)))
    cfg = ScaffoldConfig()
    proj = {k: torch.from_numpy(rng.normal(size=s)) for k, s in {
        "w_means": (n, 3), "w_cov": (n, 3, 3), "w_opac": (n,), "w_col": (n, 3)}.items()}

    raw = {
        "offsets": rng.normal(0, 0.02, (n, 3)),
        "rotations": rng.normal(size=(n, 4)),
        "log_scales": rng.uniform(-5.0, -1.0, (n, 3)),
        "opacity_logits": rng.normal(size=(n, 1)),
        "colors_raw": rng.normal(size=(n, 3)),
    }

    def run(tensors):
        gset = scaffold(verts, GaussianAttributes(*tensors), cfg)
        out = (gset.means * proj["w_means"]).sum()
        out = out + (gset.covariances * proj["w_cov"]).sum()
        out = out + (gset.opacities * proj["w_opac"]).sum()
        out = out + (gset.colors * proj["w_col"]).sum()
        return out + tightness(GaussianAttributes(*tensors))

    leaves = [torch.from_numpy(raw[k]).requires_grad_(True) for k in raw]
    run(leaves).backward()

    report = []
    for j, key in enumerate(raw):
        def f(x, j=j):
            tensors = [t.detach() for t in leaves]
            tensors[j] = x
            return run(tensors)

        fd = central_difference(f, leaves[j], h)
        report.append(_entry(f"scaffold.{key}", leaves[j].grad.numpy(), fd, SMOOTH_TOL))
    return report


def check_lbs(seed: int, num_vertices: int = 60, h: float = 1e-4) -> list[dict]:
    """Skinning gradients on a small synthetic body (smooth path, h = 1e-4)."""
    model = build_synthetic_model(
        SyntheticBodyConfig(num_vertices=num_vertices, num_betas=3, seed=seed)
    )
    rng = np.random.default_rng(seed)
    parts = {
        "template": torch.from_numpy(model.template_vertices),
        "blend": torch.from_numpy(model.shape_blendshapes),
        "regressor": torch.from_numpy(model.joint_regressor),
        "skin": torch.from_numpy(model.skinning_weights),
    }
    from .rotations import rotation_6d_to_matrix

    rots = rotation_6d_to_matrix(torch.from_numpy(rng.normal(size=(24, 6))))
    betas = torch.from_numpy(rng.normal(size=3) * 0.5)
    trans = torch.from_numpy(rng.normal(size=3) * 0.1)
    w_v = torch.from_numpy(rng.normal(size=(num_vertices, 3)))
    w_j = torch.from_numpy(rng.normal(size=(24, 3)))

    def run(rots_t, betas_t, trans_t):
        verts, joints = lbs(
            parts["template"], parts["blend"], parts["regressor"], parts["skin"],
            model.parents, rots_t, betas_t, trans_t,
        )
        return (verts * w_v).sum() + (joints * w_j).sum()

    leaves = [
        rots.clone().requires_grad_(True),
        betas.clone().requires_grad_(True),
        trans.clone().requires_grad_(True),
    ]
    run(*leaves).backward()
    names = ["theta", "beta", "translation"]
    report = []
    for j, name in enumerate(names):
        def f(x, j=j):
            args = [t.detach() for t in leaves]
            args[j] = x
            return run(*args)

        fd = central_difference(f, leaves[j], h)
        report.append(_entry(f"lbs.{name}", leaves[j].grad.numpy(), fd, SMOOTH_TOL))
    return report


def check_losses(seed: int, size: int = 48, n_probe: int = 48, h: float = 1e-5) -> list[dict]:
    """d(total)/d(render pixels), perceptual proxy included, on a random
    probe subset of pixels (full FD over every pixel would be quadratic)."""
    rng = np.random.default_rng(seed)
    weights = LossWeights(lambda_perceptual=0.01, lambda_alpha=0.1, lambda_tight=0.1)
    target = torch.from_numpy(rng.uniform(0, 1, (size, size, 3)))
    mask = torch.from_numpy((rng.uniform(0, 1, (size, size)) > 0.5).astype(np.float64))
    attrs = GaussianAttributes(
        offsets=torch.from_numpy(rng.normal(0, 0.01, (4, 3))),
        rotations=torch.from_numpy(rng.normal(size=(4, 4))),
        log_scales=torch.from_numpy(rng.uniform(-5, -1, (4, 3))),
        opacity_logits=torch.from_numpy(rng.normal(size=(4, 1))),
        colors_raw=torch.from_numpy(rng.normal(size=(4, 3))),
    )
    from .body import ShapeParams

    shape = ShapeParams(torch.from_numpy(rng.normal(size=4) * 0.5))

    def run(rgb, alpha):
        report = total_loss(
            image_loss([ImageBuffer(rgb, alpha)], [(target, mask)], weights), attrs, shape, weights
        )
        return report.total

    rgb0 = torch.from_numpy(rng.uniform(0.05, 0.95, (size, size, 3))).requires_grad_(True)
    alpha0 = torch.from_numpy(rng.uniform(0.05, 0.95, (size, size))).requires_grad_(True)
    run(rgb0, alpha0).backward()

    report = []
    for name, leaf in (("rgb", rgb0), ("alpha", alpha0)):
        idx = rng.choice(leaf.numel(), size=min(n_probe, leaf.numel()), replace=False)
        fd = np.zeros(len(idx))
        base = leaf.detach().clone()
        for k, i in enumerate(idx):
            hi = base.clone()
            hi.view(-1)[i] += h
            lo = base.clone()
            lo.view(-1)[i] -= h
            if name == "rgb":
                fd[k] = (float(run(hi, alpha0.detach())) - float(run(lo, alpha0.detach()))) / (2 * h)
            else:
                fd[k] = (float(run(rgb0.detach(), hi)) - float(run(rgb0.detach(), lo))) / (2 * h)
        analytic = leaf.grad.view(-1)[idx].numpy()
        report.append(_entry(f"losses.{name}", analytic, fd, SMOOTH_TOL))
    return report


SUITES = {
    "rasterizer": check_rasterizer,
    "scaffold": check_scaffold,
    "lbs": check_lbs,
    "losses": check_losses,
}


def run_gradcheck(module: str = "all", seed: int = 0) -> dict:
    if module == "all":
        names = list(SUITES)
    elif module in SUITES:
        names = [module]
    else:
        raise ValueError(f"unknown gradcheck module {module!r}; choose from {list(SUITES)} or 'all'")
    entries = []
    for name in names:
        entries.extend(SUITES[name](seed))
    return {
        "seed": seed,
        "module": module,
        "checks": entries,
        "pass": all(e["pass"] for e in entries),
    }
