import os
import subprocess
import sys

import numpy as np
import pytest

from svgir.cli import EXIT_INVALID, EXIT_OK, main
from svgir.io import load_float_image, load_scene


@pytest.fixture(scope="module")
def surfel_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("surfel")
    assert main(["synth", "single-surfel", "--res", "16", "--k-samples", "16", "--output-dir", str(d)]) == EXIT_OK
    return d


def run_cli(*args, threads=None, cwd=None):
    cmd = [sys.executable, "-m", "svgir.cli", *args]
    if threads is not None:
        cmd += ["--threads", str(threads)]
    env = {k: v for k, v in os.environ.items() if k != "NUMBA_NUM_THREADS"}
    return subprocess.run(cmd, capture_output=True, text=True, cwd=cwd, env=env)


def test_synth_outputs(surfel_dir):
    for name in ("scene.json", "microbuffers.svmb", "gt_000.png", "gt_000.fimg", "albedo_000.fimg",
                 "environment.fimg"):
        assert (surfel_dir / name).is_file(), name
    sc = load_scene(surfel_dir / "scene.json")
    assert len(sc.gaussians) == 1 and sc.images[0].shape == (16, 16, 3)


def test_render_writes_images(surfel_dir, tmp_path):
    code = main(["render", str(surfel_dir / "scene.json"), "--cache", str(surfel_dir / "microbuffers.svmb"),
                 "--k-samples", "16", "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    for name in ("render_000.png", "render_000.fimg", "depth_000.fimg", "alpha_000.fimg", "normal_000.fimg"):
        assert (tmp_path / name).is_file(), name
    img = load_float_image(tmp_path / "render_000.fimg")
    gt = load_float_image(surfel_dir / "gt_000.fimg")
    np.testing.assert_allclose(img, gt, atol=1e-6)


def test_render_radiance_mode(surfel_dir, tmp_path):
    assert main(["render", str(surfel_dir / "scene.json"), "--radiance", "--output-dir", str(tmp_path)]) == EXIT_OK
    assert load_float_image(tmp_path / "render_000.fimg").max() > 0


def test_eval_identical_sets(surfel_dir, tmp_path, capsys):
    code = main(["eval", str(surfel_dir), str(surfel_dir), "--glob", "gt_*", "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    text = (tmp_path / "metrics.txt").read_text()
    assert "psnr mean inf" in text
    assert "ssim mean 1" in text
    assert "psnr" in capsys.readouterr().out


def test_bake_skips_existing(surfel_dir, tmp_path, capsys):
    args = ["bake", str(surfel_dir / "scene.json"), "--k-samples", "8", "--output-dir", str(tmp_path)]
    assert main(args) == EXIT_OK
    first = (tmp_path / "microbuffers.svmb").read_bytes()
    capsys.readouterr()
    assert main(args[:3] + ["16"] + args[4:]) == EXIT_OK
    assert "exists" in capsys.readouterr().out
    assert (tmp_path / "microbuffers.svmb").read_bytes() == first
    assert main(args[:3] + ["16"] + args[4:] + ["--force"]) == EXIT_OK
    assert (tmp_path / "microbuffers.svmb").read_bytes() != first


def test_train_and_relight(surfel_dir, tmp_path):
    code = main(["train", str(surfel_dir / "scene.json"), "--stage0-iters", "3", "--stage2-iters", "4",
                 "--k-samples", "8", "--quiet", "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    log = (tmp_path / "train.log").read_text().splitlines()
    assert len(log) == 7 and "wall=" not in log[0]
    assert (tmp_path / "run_config.json").is_file()
    rl = tmp_path / "relit"
    code = main(["relight", str(tmp_path / "trained.json"), "--env", str(surfel_dir / "environment.fimg"),
                 "--cache", str(tmp_path / "microbuffers.svmb"), "--indirect-only", "--output-dir", str(rl)])
    assert code == EXIT_OK
    assert (rl / "relit_000.fimg").is_file() and (rl / "indirect_000.fimg").is_file()


def test_gradcheck_report(surfel_dir, tmp_path):
    code = main(["gradcheck", str(surfel_dir / "scene.json"), "--cache", str(surfel_dir / "microbuffers.svmb"),
                 "--per-group", "2", "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    last = (tmp_path / "gradcheck.txt").read_text().splitlines()[-1]
    assert last.startswith("max_rel_error") and float(last.split()[1]) < 1e-3


def test_config_file_and_flag_precedence(surfel_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"k_samples": 8, "seed": 5}')
    out = tmp_path / "o"
    assert main(["bake", str(surfel_dir / "scene.json"), "--config", str(cfg), "--output-dir", str(out)]) == 0
    from svgir.microbuffer import load_microbuffers
    assert load_microbuffers(out / "microbuffers.svmb").k == 8
    assert main(["bake", str(surfel_dir / "scene.json"), "--config", str(cfg), "--k-samples", "4", "--force",
                 "--output-dir", str(out)]) == 0
    assert load_microbuffers(out / "microbuffers.svmb").k == 4


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["render"],
    ["render", "x.json", "--no-such-flag"],
    ["synth", "single-surfel", "--set", "novalue"],
    ["bake", "x.json", "--threads", "0"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == EXIT_INVALID


def test_missing_file_exits_1(tmp_path):
    assert main(["render", str(tmp_path / "missing.json"), "--output-dir", str(tmp_path)]) == EXIT_INVALID


def test_unknown_fixture_exits_1(tmp_path):
    assert main(["synth", "teapot", "--output-dir", str(tmp_path)]) == EXIT_INVALID


def test_help_exits_0(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "render" in capsys.readouterr().out


def test_console_entry_point(surfel_dir, tmp_path):
    r = run_cli("render", str(surfel_dir / "scene.json"), "--radiance", "--output-dir", str(tmp_path))
    assert r.returncode == 0, r.stderr
    r = run_cli("render", str(tmp_path / "nope.json"))
    assert r.returncode == 1
    assert "nope.json" in r.stderr
