import json

import numpy as np
import pytest

from splatbody.cli import main


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenes") / "scene"
    code = main([
        "generate-data", "--out", str(out), "--views", "4", "--resolution", "48",
        "--vertices", "120", "--betas", "2", "--seed", "5",
    ])
    assert code == 0
    return out


def test_unknown_subcommand_exits_one(capsys):
    assert main(["frobnicate"]) == 1


def test_missing_required_flag_exits_one():
    assert main(["fit", "--out", "/tmp/x"]) == 1


def test_render_requires_params_or_ckpt(scene_dir, tmp_path):
    code = main(["render", "--scene", str(scene_dir), "--out", str(tmp_path / "r")])
    assert code == 1


def test_generate_is_seed_reproducible(tmp_path, scene_dir):
    other = tmp_path / "again"
    assert main([
        "generate-data", "--out", str(other), "--views", "4", "--resolution", "48",
        "--vertices", "120", "--betas", "2", "--seed", "5",
    ]) == 0
    for name in ("view_000.png", "mask_003.png", "params.json", "cameras.json"):
        assert (other / name).read_bytes() == (scene_dir / name).read_bytes(), name


def test_fit_evaluate_render_roundtrip(scene_dir, tmp_path):
    fit_out = tmp_path / "fit"
    assert main([
        "fit", "--scene", str(scene_dir), "--init", "gt", "--steps", "3",
        "--out", str(fit_out), "--threads", "2",
    ]) == 0
    assert (fit_out / "params.json").exists()
    trace = (fit_out / "trace.csv").read_text().splitlines()
    assert trace[0].startswith("step,")
    assert len(trace) == 4

    eval_out = tmp_path / "eval"
    assert main([
        "evaluate", "--scene", str(scene_dir), "--params", str(fit_out / "params.json"),
        "--out", str(eval_out),
    ]) == 0
    metrics = json.loads((eval_out / "metrics.json").read_text())
    assert metrics["summary"]["psnr"] >= 50.0  # quantization ceiling at gt init
    assert metrics["summary"]["mpjpe_mm"] < 1.0
    header = (eval_out / "metrics.csv").read_text().splitlines()[0]
    for col in ("PSNR", "SSIM", "proxy-perceptual", "MPJPE"):
        assert col in header

    render_out = tmp_path / "renders"
    assert main([
        "render", "--scene", str(scene_dir), "--params", str(fit_out / "params.json"),
        "--out", str(render_out), "--camera", "orbit:2",
        "--ply", str(tmp_path / "out.ply"),
    ]) == 0
    assert (render_out / "render_001.png").exists()
    assert (tmp_path / "out.ply").read_bytes().startswith(b"ply")


def test_render_bad_camera_index(scene_dir, tmp_path):
    fit_out = tmp_path / "fit2"
    main(["fit", "--scene", str(scene_dir), "--init", "gt", "--steps", "1",
          "--out", str(fit_out)])
    code = main([
        "render", "--scene", str(scene_dir), "--params", str(fit_out / "params.json"),
        "--out", str(tmp_path / "r"), "--camera", "11",
    ])
    assert code == 1


def test_gradcheck_subcommand(tmp_path):
    out = tmp_path / "report.json"
    code = main(["gradcheck", "--module", "rasterizer", "--seed", "3", "--out", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["pass"] is True
    assert all(e["max_rel_err"] < 1e-2 and e["pass"] for e in report["checks"])
    assert {e["param"].split(".")[1] for e in report["checks"]} == {
        "means", "covariances", "opacities", "colors"
    }


def test_bench_smoke(tmp_path):
    out = tmp_path / "bench.json"
    code = main([
        "bench", "--gaussians", "500", "--resolution", "64",
        "--thread-counts", "1,2", "--repeats", "3", "--out", str(out),
    ])
    assert code == 0
    table = json.loads(out.read_text())
    assert {r["backend"] for r in table["results"]} >= {"python"}
    assert all(r["ms_per_frame"] > 0 for r in table["results"])


def test_train_toy_smoke(scene_dir, tmp_path):
    ckpt = tmp_path / "toy.gstp"
    code = main([
        "train-toy", "--scene", str(scene_dir), "--out", str(ckpt),
        "--steps", "4", "--lr", "1e-3", "--threads", "2",
    ])
    assert code == 0
    assert ckpt.read_bytes()[:4] == b"GSTP"
    render_out = tmp_path / "ckpt_render"
    assert main([
        "render", "--scene", str(scene_dir), "--ckpt", str(ckpt),
        "--out", str(render_out), "--camera", "0",
    ]) == 0
    assert (render_out / "render_000.png").exists()
