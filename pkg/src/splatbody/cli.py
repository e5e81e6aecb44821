"""Command-line entry point: generate-data, fit, train-toy, render, evaluate,
gradcheck, bench.

Every subcommand honors --seed (bit reproducibility in single-threaded mode)
and --threads. TOML config files mirror the option dataclasses; explicit
flags override file values. Exit codes: 0 success, 1 validation/usage error,
2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import rasterizer
from .body import (
    PoseParams,
    ShapeParams,
    SyntheticBodyConfig,
    build_synthetic_model,
    forward_lbs,
    load_body_model,
    save_body_model,
)
from .camera import Camera, RigConfig, look_at
from .dataio import (
    SceneConfig,
    generate_scene,
    gt_from_dict,
    load_scene,
    params_to_dict,
    save_scene,
)
from .fitting import FitInit, FitOptions, fit_scene
from .gaussians import ScaffoldConfig, export_ply, scaffold
from .gradcheck import run_gradcheck
from .losses import LossWeights, perceptual_proxy
from .metrics import body_bbox_2d, mpjpe, psnr, ssim
from .predictor import (
    PredictorConfig,
    TrainState,
    load_checkpoint,
    save_checkpoint,
    train_step,
)


class ValidationError(Exception):
    pass


def _load_toml(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    with open(p, "rb") as f:
        return tomllib.load(f)


def _weights_from(cfg: dict, args) -> LossWeights:
    section = dict(cfg.get("weights", {}))
    for key in ("lambda_perceptual", "lambda_alpha", "lambda_tight", "lambda_beta"):
        v = getattr(args, key, None)
        if v is not None:
            section[key] = v
    return LossWeights(**section)


def _apply_threads(n: int):
    torch.set_num_threads(max(1, n))
    rasterizer.set_default_threads(n)


def _seed_everything(seed: int):
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config", type=str, default=None, help="TOML config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatbody")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render synthetic multi-view scenes")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--body-model", type=str, default=None, help="existing .gstb container")
    p.add_argument("--vertices", type=int, default=690)
    p.add_argument("--betas", type=int, default=4)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--resolution", type=int, default=96)
    p.add_argument("--radius", type=float, default=2.4)
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--pose-seed", type=int, default=None)
    p.add_argument("--appearance-seed", type=int, default=None)
    p.add_argument("--offset-bound", type=float, default=0.02,
                   help="max |offset| of the ground-truth appearance (m)")

    p = sub.add_parser("fit", help="per-scene inverse rendering")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--init", default="gt", help="gt | perturbed:<deg> | tpose")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--weights", type=str, default=None, help="TOML file with [weights]")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-perceptual", dest="lambda_perceptual", type=float, default=None)
    p.add_argument("--lambda-alpha", dest="lambda_alpha", type=float, default=None)
    p.add_argument("--lambda-tight", dest="lambda_tight", type=float, default=None)
    p.add_argument("--lambda-beta", dest="lambda_beta", type=float, default=None)
    p.add_argument("--trace-format", choices=("json", "csv"), default="csv")
    p.add_argument("--turntable", type=int, default=8,
                   help="orbit views of the result to render (0 disables)")
    p.add_argument("--emit-plots", action="store_true")

    p = sub.add_parser("train-toy", help="overfit the grouped-token predictor on one scene")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--target-psnr", type=float, default=None)
    p.add_argument("--emit-plots", action="store_true")

    p = sub.add_parser("render", help="render a scene's cameras from params or checkpoint")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--params", type=str, default=None, help="params.json (fit output or gt)")
    p.add_argument("--ckpt", type=str, default=None, help="predictor checkpoint")
    p.add_argument("--camera", default="all", help="view index, 'all', or orbit:<n>")
    p.add_argument("--out", required=True)
    p.add_argument("--ply", type=str, default=None, help="also export the splats as PLY")

    p = sub.add_parser("evaluate", help="image + joint metrics for params on a scene")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", type=str, default=None, help="directory for metrics.{json,csv}")
    p.add_argument("--emit-plots", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--module", default="all",
                   choices=("all", "rasterizer", "scaffold", "lbs", "losses"))
    p.add_argument("--out", type=str, default=None, help="write the JSON report here")

    p = sub.add_parser("bench", help="rasterizer throughput table")
    _add_common(p)
    p.add_argument("--gaussians", type=int, default=6890)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--thread-counts", default="1,8")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--out", type=str, default=None)
    return parser


# ---------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    cfg = _load_toml(args.config)
    if args.body_model:
        model = load_body_model(args.body_model)
    else:
        model = build_synthetic_model(
            SyntheticBodyConfig(
                num_vertices=args.vertices, num_betas=args.betas, seed=args.seed
            )
        )
    rig = RigConfig(
        num_views=args.views, resolution=args.resolution, radius=args.radius,
        **cfg.get("rig", {}),
    )
    out = Path(args.out)
    scene_cfg = SceneConfig(rig=rig, offset_bound=args.offset_bound)
    for k in range(args.scenes):
        pose_seed = (args.pose_seed if args.pose_seed is not None else args.seed) + k
        app_seed = (args.appearance_seed if args.appearance_seed is not None else args.seed + 9000) + k
        ds = generate_scene(model, pose_seed, scene_cfg, app_seed, threads=args.threads)
        scene_dir = out if args.scenes == 1 else out / f"scene_{k:03d}"
        save_scene(ds, scene_dir)
        print(f"wrote {scene_dir} ({ds.num_views} views @ {args.resolution}px)")
    return 0


def _parse_init(spec: str, ds) -> FitInit:
    if spec == "gt":
        return FitInit.from_gt(ds)
    if spec == "tpose":
        return FitInit.tpose(ds)
    if spec.startswith("perturbed:"):
        return FitInit.perturbed(ds, degrees=float(spec.split(":", 1)[1]), seed=0)
    raise ValidationError(f"unknown --init {spec!r} (use gt | perturbed:<deg> | tpose)")


def cmd_fit(args) -> int:
    cfg = _load_toml(args.config)
    wcfg = _load_toml(args.weights) if args.weights else cfg
    weights = _weights_from(wcfg, args)
    ds = load_scene(args.scene)
    init = _parse_init(args.init, ds)
    fit_section = dict(cfg.get("fit", {}))
    if args.steps is not None:
        fit_section["steps"] = args.steps
    opts = FitOptions(weights=weights, threads=args.threads, seed=args.seed, **fit_section)

    t0 = time.time()
    res = fit_scene(ds, ds.body_model, init, opts)
    elapsed = time.time() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = params_to_dict(res.pose, res.shape, res.attrs, res.scaffold_cfg)
    payload["body_model"] = ds.body_model_ref
    (out / "params.json").write_text(json.dumps(payload))

    if args.trace_format == "json":
        lines = [r.to_json_line(i) for i, r in enumerate(res.trace)]
        (out / "trace.jsonl").write_text("\n".join(lines) + "\n")
    else:
        from .losses import LossReport

        rows = [",".join(LossReport.CSV_FIELDS)]
        rows += [r.to_csv_row(i) for i, r in enumerate(res.trace)]
        (out / "trace.csv").write_text("\n".join(rows) + "\n")

    if args.turntable > 0:
        _render_turntable(ds, res, out, args.turntable, args.threads)
    if args.emit_plots:
        _plot_trace(res.trace, out)

    summary = {
        "best_step": res.best_step,
        "best_total": min(r.item() for r in res.trace),
        "steps": opts.steps,
        "seconds": elapsed,
    }
    if ds.gt is not None:
        _, gt_joints = forward_lbs(ds.body_model, ds.gt.pose, ds.gt.shape)
        summary["mpjpe_mm"] = mpjpe(res.joints.numpy(), gt_joints.numpy())
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return 0


def _render_turntable(ds, res, out: Path, n: int, threads: int):
    from PIL import Image

    from .dataio import quantize_u8

    with torch.no_grad():
        verts, joints = forward_lbs(ds.body_model, res.pose, res.shape)
        gset = scaffold(verts, res.attrs, res.scaffold_cfg)
    base = ds.views[0].camera
    rig = RigConfig(num_views=n, resolution=base.width, radius=2.4)
    from .camera import ring_cameras

    for i, cam in enumerate(ring_cameras(rig, joints[0].numpy())):
        rgb, _ = rasterizer.render_arrays(gset, cam, threads=threads)
        Image.fromarray(quantize_u8(rgb), mode="RGB").save(out / f"turntable_{i:03d}.png")


def _plot_trace(trace, out: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    steps = np.arange(len(trace))
    for key in ("total", "mse", "alpha_mask", "tight"):
        ax.plot(steps, [r.scalars()[key] for r in trace], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss_curve.svg")
    plt.close(fig)


def cmd_train_toy(args) -> int:
    cfg = _load_toml(args.config)
    ds = load_scene(args.scene)
    res = ds.views[0].image.shape[0]
    pcfg_section = dict(cfg.get("predictor", {}))
    pcfg_section.setdefault("image_size", res)
    if "groups" not in pcfg_section or "group_size" not in pcfg_section:
        V = ds.body_model.num_vertices
        k = pcfg_section.get("groups")
        if k is None:  # largest group count up to 26 that divides V
            k = max((d for d in range(1, 27) if V % d == 0), default=1)
        if V % k != 0:
            raise ValidationError(f"body V={V} not divisible into {k} groups")
        pcfg_section["groups"] = k
        pcfg_section["group_size"] = V // k
    pcfg_section.setdefault("num_betas", ds.body_model.num_betas)
    pcfg = PredictorConfig(**pcfg_section)
    if pcfg.num_vertices != ds.body_model.num_vertices:
        raise ValidationError(
            f"groups*group_size={pcfg.num_vertices} != body vertices {ds.body_model.num_vertices}"
        )
    train_section = dict(cfg.get("train", {}))
    steps = args.steps if args.steps is not None else int(train_section.get("steps", 5000))
    lr = args.lr if args.lr is not None else float(train_section.get("lr", 1e-4))
    target = args.target_psnr if args.target_psnr is not None else train_section.get("target_psnr")
    weights = _weights_from(cfg, args)

    state = TrainState.create(pcfg, lr=lr, seed=args.seed)
    history = []
    best_psnr = -1.0
    t0 = time.time()
    for step in range(steps):
        report = train_step(state, ds.body_model, ds, weights, threads=args.threads)
        if step % 50 == 0 or step == steps - 1:
            cur = _predictor_psnr(state, ds, args.threads)
            best_psnr = max(best_psnr, cur)
            history.append({"step": step, "total": report.item(), "psnr": cur})
            print(f"step {step}: total={report.item():.5f} psnr={cur:.2f} dB")
            if target is not None and cur >= float(target):
                break
    save_checkpoint(state, args.out)
    summary = {"steps": step + 1, "best_psnr": best_psnr, "seconds": time.time() - t0}
    print(json.dumps(summary))
    if args.emit_plots:
        outdir = Path(args.out).parent
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([h["step"] for h in history], [h["psnr"] for h in history])
        ax.set_xlabel("step")
        ax.set_ylabel("PSNR (dB)")
        fig.tight_layout()
        fig.savefig(outdir / "psnr_curve.svg")
        plt.close(fig)
    return 0


def _predictor_psnr(state: TrainState, ds, threads: int) -> float:
    from .predictor import predictor_forward_views

    with torch.no_grad():
        _, renders, _ = predictor_forward_views(
            state.model, ds.body_model, ds, 0, list(range(ds.num_views)),
            state.scaffold_cfg, threads,
        )
    vals = [psnr(r.rgb.numpy(), v.image) for r, v in zip(renders, ds.views)]
    return float(np.mean(vals))


def _params_or_ckpt_gaussians(args, ds):
    if bool(args.params) == bool(args.ckpt):
        raise ValidationError("provide exactly one of --params or --ckpt")
    if args.params:
        payload = json.loads(Path(args.params).read_text())
        gt = gt_from_dict(payload)
        with torch.no_grad():
            verts, joints = forward_lbs(ds.body_model, gt.pose, gt.shape)
            gset = scaffold(verts, gt.attributes, gt.scaffold_cfg)
        return gset, joints
    state = load_checkpoint(args.ckpt)
    from .predictor import predictor_forward_views

    with torch.no_grad():
        out, _, joints = predictor_forward_views(
            state.model, ds.body_model, ds, 0, [], state.scaffold_cfg
        )
        verts, joints = forward_lbs(ds.body_model, out.pose(), out.shape())
        gset = scaffold(verts, out.attrs, state.scaffold_cfg)
    return gset, joints


def cmd_render(args) -> int:
    from PIL import Image

    from .camera import ring_cameras
    from .dataio import quantize_u8

    ds = load_scene(args.scene)
    gset, joints = _params_or_ckpt_gaussians(args, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.camera == "all":
        cams = ds.cameras()
    elif args.camera.startswith("orbit:"):
        n = int(args.camera.split(":", 1)[1])
        base = ds.views[0].camera
        cams = ring_cameras(
            RigConfig(num_views=n, resolution=base.width, radius=2.4), joints[0].numpy()
        )
    else:
        idx = int(args.camera)
        if not 0 <= idx < ds.num_views:
            raise ValidationError(f"camera index {idx} out of range [0, {ds.num_views})")
        cams = [ds.views[idx].camera]

    for i, cam in enumerate(cams):
        rgb, alpha = rasterizer.render_arrays(gset, cam, threads=args.threads)
        rgba = np.dstack([quantize_u8(rgb), quantize_u8(alpha)])
        Image.fromarray(rgba, mode="RGBA").save(out / f"render_{i:03d}.png")
    if args.ply:
        export_ply(gset, args.ply)
    print(f"wrote {len(cams)} renders to {out}")
    return 0


def cmd_evaluate(args) -> int:
    ds = load_scene(args.scene)
    payload = json.loads(Path(args.params).read_text())
    fitted = gt_from_dict(payload)
    with torch.no_grad():
        verts, joints = forward_lbs(ds.body_model, fitted.pose, fitted.shape)
        gset = scaffold(verts, fitted.attributes, fitted.scaffold_cfg)

    rows = []
    for i, view in enumerate(ds.views):
        rgb, alpha = rasterizer.render_arrays(gset, view.camera, threads=args.threads)
        row = {
            "view": i,
            "psnr": psnr(rgb, view.image),
            "ssim": ssim(rgb, view.image),
            "proxy_perceptual": float(
                perceptual_proxy(torch.as_tensor(rgb), torch.as_tensor(view.image))
            ),
        }
        x0, y0, x1, y1 = body_bbox_2d(view.camera, verts.numpy())
        if x1 - x0 >= 16 and y1 - y0 >= 16:
            crop = (slice(y0, y1), slice(x0, x1))
            row["psnr_bbox"] = psnr(rgb[crop], view.image[crop])
            row["ssim_bbox"] = ssim(rgb[crop], view.image[crop])
            row["proxy_perceptual_bbox"] = float(
                perceptual_proxy(
                    torch.as_tensor(rgb[crop]), torch.as_tensor(view.image[crop])
                )
            )
        rows.append(row)

    summary = {
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "proxy_perceptual": float(np.mean([r["proxy_perceptual"] for r in rows])),
    }
    bbox_rows = [r for r in rows if "psnr_bbox" in r]
    if bbox_rows:
        summary["psnr_bbox"] = float(np.mean([r["psnr_bbox"] for r in bbox_rows]))
        summary["ssim_bbox"] = float(np.mean([r["ssim_bbox"] for r in bbox_rows]))
        summary["proxy_perceptual_bbox"] = float(
            np.mean([r["proxy_perceptual_bbox"] for r in bbox_rows])
        )
    if ds.gt is not None:
        _, gt_joints = forward_lbs(ds.body_model, ds.gt.pose, ds.gt.shape)
        summary["mpjpe_mm"] = mpjpe(joints.numpy(), gt_joints.numpy())

    print(json.dumps(summary, indent=1))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps({"views": rows, "summary": summary}, indent=1))
        headers = {
            "psnr": "PSNR", "ssim": "SSIM", "proxy_perceptual": "proxy-perceptual",
            "psnr_bbox": "PSNR-bbox", "ssim_bbox": "SSIM-bbox",
            "proxy_perceptual_bbox": "proxy-perceptual-bbox",
        }
        fields = list(headers)
        lines = [",".join(["view"] + list(headers.values()) + ["MPJPE"])]
        for r in rows:
            lines.append(",".join([str(r["view"])] + [str(r.get(f, "")) for f in fields] + [""]))
        mean_cells = [str(summary.get(f, "")) for f in fields]
        lines.append(",".join(["mean"] + mean_cells + [str(summary.get("mpjpe_mm", ""))]))
        (out / "metrics.csv").write_text("\n".join(lines) + "\n")
        if args.emit_plots:
            _plot_metric_bars(rows, out)
    return 0


def _plot_metric_bars(rows, out: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    views = [r["view"] for r in rows]
    ax.bar(views, [r["psnr"] for r in rows])
    ax.set_xlabel("view")
    ax.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(out / "metric_bars.svg")
    plt.close(fig)


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.module, seed=args.seed)
    text = json.dumps(report, indent=1)
    print(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0 if report["pass"] else 2


def cmd_bench(args) -> int:
    from .gaussians import GaussianSet

    rng = np.random.default_rng(args.seed)
    n, res = args.gaussians, args.resolution
    means = rng.normal(0, 0.4, (n, 3)).astype(np.float32)
    scales = np.exp(rng.uniform(np.log(0.005), np.log(0.03), (n, 3)))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    from .gradcheck import _quat_mats

    R = _quat_mats(quats)
    covs = np.einsum("nij,nj,nkj->nik", R, scales**2, R).astype(np.float32)
    opac = rng.uniform(0.5, 1.0, n).astype(np.float32)
    colors = rng.uniform(0, 1, (n, 3)).astype(np.float32)
    gset = GaussianSet(
        torch.from_numpy(means), torch.from_numpy(covs),
        torch.from_numpy(opac), torch.from_numpy(colors),
    )
    cam = Camera(look_at([0, 0, -3.0], [0, 0, 0]), fx=1.2 * res, fy=1.2 * res,
                 cx=res / 2, cy=res / 2, width=res, height=res)
    thread_counts = [int(x) for x in str(args.thread_counts).split(",")]

    results = []
    for backend in rasterizer.available_backends():
        for threads in thread_counts:
            reps = args.repeats if backend == "compiled" else max(2, args.repeats // 10)
            rasterizer.render_arrays(gset, cam, threads=threads, backend=backend)  # warmup
            t0 = time.perf_counter()
            for _ in range(reps):
                rasterizer.render_arrays(gset, cam, threads=threads, backend=backend)
            ms = (time.perf_counter() - t0) / reps * 1000
            results.append({"backend": backend, "threads": threads, "ms_per_frame": ms,
                            "fps": 1000.0 / ms})
            print(f"{backend:>8} threads={threads}: {ms:8.2f} ms/frame  ({1000.0/ms:6.1f} fps)")
    print(f"(context figure from the source method: 47 fps full model on GPU; "
          f"this table is {n} Gaussians at {res}x{res} on CPU)")
    if args.out:
        Path(args.out).write_text(json.dumps({"config": {"gaussians": n, "resolution": res},
                                              "results": results}, indent=1))
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "fit": cmd_fit,
    "train-toy": cmd_train_toy,
    "render": cmd_render,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        _seed_everything(args.seed)
        _apply_threads(args.threads)
        return COMMANDS[args.command](args)
    except (ValidationError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (RuntimeError, ArithmeticError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
