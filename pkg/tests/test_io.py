import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_scene
from svgir.errors import InvalidParameterError
from svgir.io import (
    FLOAT_MAGIC, load_config, load_environment, load_float_image, load_image, load_png, load_rgbe, load_scene,
    save_config, save_float_image, save_png, save_rgbe, save_scene,
)
from svgir.microbuffer import load_microbuffers, save_microbuffers
from svgir.raytrace import bake_microbuffers


def test_float_dump_layout(tmp_path):
    img = np.arange(2 * 3 * 3, dtype=np.float64).reshape(2, 3, 3) / 7
    save_float_image(tmp_path / "a.fimg", img)
    raw = (tmp_path / "a.fimg").read_bytes()
    assert raw[:8] == FLOAT_MAGIC
    assert np.frombuffer(raw[8:16], "<u4").tolist() == [3, 2]
    np.testing.assert_array_equal(np.frombuffer(raw[16:], "<f4"), img.astype("<f4").ravel())


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_float_dump_round_trip(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("f") / "x.fimg"
    save_float_image(p, img)
    back = load_float_image(p)
    np.testing.assert_array_equal(back, img.astype(np.float64))
    save_float_image(p, back)
    np.testing.assert_array_equal(load_float_image(p), back)


def test_float_dump_grayscale(tmp_path):
    save_float_image(tmp_path / "g.fimg", np.ones((2, 2)) * 0.5)
    assert load_float_image(tmp_path / "g.fimg").shape == (2, 2, 3)


def test_float_dump_corrupt(tmp_path):
    (tmp_path / "bad.fimg").write_bytes(b"nope")
    with pytest.raises(InvalidParameterError):
        load_float_image(tmp_path / "bad.fimg")
    save_float_image(tmp_path / "t.fimg", np.zeros((2, 2, 3)))
    (tmp_path / "t.fimg").write_bytes((tmp_path / "t.fimg").read_bytes()[:-4])
    with pytest.raises(InvalidParameterError):
        load_float_image(tmp_path / "t.fimg")


def test_rgbe_known_bytes(tmp_path):
    # mantissa bytes m with exponent byte e decode to (m + 0.5) * 2^(e - 136)
    p = tmp_path / "k.hdr"
    p.write_bytes(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 2\n" + bytes([128, 64, 0, 129, 0, 0, 0, 0]))
    img = load_rgbe(p)
    np.testing.assert_allclose(img[0, 0], [128.5 / 128, 64.5 / 128, 0.5 / 128])
    np.testing.assert_array_equal(img[0, 1], 0)


def test_rgbe_rle_scanlines(tmp_path):
    w = 10
    line = bytearray([2, 2, 0, w])
    for c, v in enumerate([200, 100, 50, 130]):
        if c == 1:
            line += bytes([w]) + bytes(range(100, 100 + w))  # literal run
        else:
            line += bytes([128 + w, v])  # repeated run
    p = tmp_path / "r.hdr"
    p.write_bytes(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 2 +X 10\n" + bytes(line) * 2)
    img = load_rgbe(p)
    assert img.shape == (2, 10, 3)
    scale = 2.0 ** (130 - 136)
    np.testing.assert_allclose(img[1, :, 0], 200.5 * scale)
    np.testing.assert_allclose(img[0, :, 1], (np.arange(100, 110) + 0.5) * scale)


def test_rgbe_round_trip_precision(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0.01, 50, (5, 7, 3))
    save_rgbe(tmp_path / "e.hdr", img)
    back = load_rgbe(tmp_path / "e.hdr")
    # 8-bit mantissa shared per pixel: error below one step of the largest channel
    assert np.all(np.abs(back - img) <= img.max(axis=-1, keepdims=True) / 128)
    save_rgbe(tmp_path / "f.hdr", back)
    np.testing.assert_array_equal(load_rgbe(tmp_path / "f.hdr"), back)


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(1).uniform(0, 1, (4, 5, 3))
    save_png(tmp_path / "p.png", img)
    back = load_png(tmp_path / "p.png")
    save_png(tmp_path / "q.png", back)
    np.testing.assert_array_equal(load_png(tmp_path / "q.png"), back)
    np.testing.assert_allclose(back, img, atol=0.02)


def test_load_image_dispatch(tmp_path):
    img = np.full((2, 2, 3), 0.25)
    save_float_image(tmp_path / "a.fimg", img)
    save_rgbe(tmp_path / "a.hdr", img)
    np.testing.assert_array_equal(load_image(tmp_path / "a.fimg"), img)
    np.testing.assert_allclose(load_image(tmp_path / "a.hdr"), img, rtol=1e-2)


def test_environment_rejects_negative(tmp_path):
    save_float_image(tmp_path / "n.fimg", -np.ones((2, 4, 3)))
    with pytest.raises(InvalidParameterError):
        load_environment(tmp_path / "n.fimg")


def test_scene_round_trip(tmp_path, small_scene):
    sc = small_scene
    sc.images = [sc.images[0].astype(np.float32).astype(np.float64)]
    sc.environment.radiance = sc.environment.radiance.astype(np.float32).astype(np.float64)
    save_scene(tmp_path / "s.json", sc)
    back = load_scene(tmp_path / "s.json")
    for f in ("positions", "quaternions", "scales", "opacities", "radiance"):
        np.testing.assert_array_equal(getattr(back.gaussians, f), getattr(sc.gaussians, f))
    for f in ("albedo", "roughness", "normal_offset"):
        np.testing.assert_array_equal(getattr(back.vertex_sets, f), getattr(sc.vertex_sets, f))
    np.testing.assert_array_equal(back.environment.radiance, sc.environment.radiance)
    np.testing.assert_array_equal(back.images[0], sc.images[0])
    c0, c1 = sc.cameras[0], back.cameras[0]
    np.testing.assert_array_equal(c1.rotation, c0.rotation)
    np.testing.assert_array_equal(c1.translation, c0.translation)
    assert (c1.fx, c1.fy, c1.cx, c1.cy, c1.width, c1.height) == (c0.fx, c0.fy, c0.cx, c0.cy, c0.width, c0.height)
    # writing the re-read scene reproduces the files byte for byte
    save_scene(tmp_path / "t.json", back)
    assert (tmp_path / "s_image_000.fimg").read_bytes() == (tmp_path / "t_image_000.fimg").read_bytes()
    a = json.loads((tmp_path / "s.json").read_text())
    b = json.loads((tmp_path / "t.json").read_text())
    a["environment"] = b["environment"] = None
    a["cameras"][0]["image_path"] = b["cameras"][0]["image_path"] = None
    assert a == b


def test_scene_sh_radiance_round_trip(tmp_path, rng):
    from conftest import random_scene as rs
    sc = rs(rng, sh=True)
    save_scene(tmp_path / "sh.json", sc, save_images=False)
    np.testing.assert_array_equal(load_scene(tmp_path / "sh.json").gaussians.radiance, sc.gaussians.radiance)


@pytest.mark.parametrize("text", ["{", "[]", '{"format": "other"}',
                                  '{"format": "svgir-scene", "version": 1, "gaussians": [{"position": [0, 0]}]}'])
def test_scene_malformed(tmp_path, text):
    (tmp_path / "bad.json").write_text(text)
    with pytest.raises(InvalidParameterError):
        load_scene(tmp_path / "bad.json")


def test_microbuffer_round_trip(tmp_path, small_scene):
    mb = bake_microbuffers(small_scene, k=8, seed=1)
    save_microbuffers(tmp_path / "m.svmb", mb)
    back = load_microbuffers(tmp_path / "m.svmb")
    for f in ("directions", "l_ind", "trans", "vis", "first_hit"):
        np.testing.assert_array_equal(getattr(back, f), getattr(mb, f))
    np.testing.assert_array_equal(back.first_uv, mb.first_uv)
    save_microbuffers(tmp_path / "n.svmb", back)
    assert (tmp_path / "m.svmb").read_bytes() == (tmp_path / "n.svmb").read_bytes()


def test_microbuffer_corrupt(tmp_path):
    (tmp_path / "x.svmb").write_bytes(b"SVGMBUF1" + np.array([2, 4], "<u8").tobytes() + b"\0" * 10)
    with pytest.raises(InvalidParameterError):
        load_microbuffers(tmp_path / "x.svmb")


def test_config_round_trip(tmp_path):
    cfg = {"k_samples": 32, "seed": 7, "lr": {"albedo": 0.02}}
    save_config(tmp_path / "c.json", cfg)
    assert load_config(tmp_path / "c.json") == cfg
    (tmp_path / "d.json").write_text("[1, 2]")
    with pytest.raises(InvalidParameterError):
        load_config(tmp_path / "d.json")
