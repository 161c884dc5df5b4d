import math

import numpy as np
import pytest

from svgir.errors import InvalidParameterError
from svgir.metrics import albedo_scale, evaluate, format_value, normal_mae, psnr, ssim


def test_identical_sets():
    rng = np.random.default_rng(0)
    imgs = [rng.uniform(0, 1, (16, 16, 3)) for _ in range(2)]
    nrm = [np.broadcast_to([0, 0, 1.0], (16, 16, 3))] * 2
    rep = evaluate(imgs, [i.copy() for i in imgs], pred_normals=nrm, gt_normals=nrm)
    assert rep.mean("psnr") == math.inf
    assert rep.mean("ssim") == 1.0
    assert rep.mean("normal_mae") == 0.0
    assert "psnr mean inf" in rep.lines()


def test_psnr_twenty_db():
    a = np.zeros((10, 10, 3))
    assert psnr(a + 0.1, a) == pytest.approx(20.0)


def test_albedo_rescale_protocol():
    rng = np.random.default_rng(1)
    gt_alb = rng.uniform(0.1, 0.5, (8, 8, 3))
    gt_img = rng.uniform(0.1, 0.9, (8, 8, 3))
    pred_alb = 2 * gt_alb
    pred_img = 2 * gt_img  # relit with doubled albedo
    np.testing.assert_allclose(albedo_scale(pred_alb, gt_alb), 0.5)
    rep = evaluate([pred_img], [gt_img], pred_albedo=[pred_alb], gt_albedo=[gt_alb])
    assert rep.mean("psnr_rescaled") == math.inf
    assert rep.mean("psnr") < 20


def test_normal_mae_right_angle():
    a = np.broadcast_to([0, 0, 1.0], (4, 4, 3))
    b = np.broadcast_to([1.0, 0, 0], (4, 4, 3))
    assert normal_mae(a, b) == pytest.approx(90.0)


def test_mismatches():
    with pytest.raises(InvalidParameterError):
        evaluate([np.zeros((4, 4, 3))], [])
    with pytest.raises(InvalidParameterError):
        evaluate([np.zeros((4, 4, 3))], [np.zeros((4, 5, 3))])
    with pytest.raises(InvalidParameterError):
        psnr(np.zeros(3), np.zeros(4))


def test_ssim_bounds():
    rng = np.random.default_rng(2)
    v = ssim(rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3)))
    assert -1 <= v < 1


def test_table_and_format():
    rep = evaluate([np.zeros((8, 8, 3))], [np.full((8, 8, 3), 0.1)], ids=["view"])
    t = rep.table()
    assert t.splitlines()[0].split()[:3] == ["image", "psnr", "ssim"]
    assert "view" in t and "20.000000" in t
    assert format_value(math.inf) == "inf"
