import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svgir.errors import InvalidStateError
from svgir.microbuffer import NONE, MicroBuffers, MicroSample
from svgir.raytrace import bake_microbuffers
from svgir.relight import one_bounce_all, one_bounce_indirect, relight_render
from svgir.render import render_pbr
from svgir.scene import Camera, EnvironmentMap, Gaussians, Scene, VertexSets
from svgir.shading import sample_hemisphere
from svgir.synthetic import make_synthetic_scene


def two_surfel_scene(albedo=0.7, k=4096, vis=1):
    """Primary at the origin, secondary facing down above it; buffers built by hand."""
    g = Gaussians([[0, 0, 0], [0, 0, 1]], [[1, 0, 0, 0], [0, 1, 0, 0]], [[0.2, 0.2]] * 2, [1, 1], np.zeros((2, 3)))
    vs = VertexSets.uniform(2, 4, albedo, 0.5)
    sc = Scene(g, vs, EnvironmentMap.constant(1.0))
    dirs = np.stack([sample_hemisphere(n, k, i) for i, n in enumerate(g.normals())])
    dirs = np.stack([d.directions for d in dirs])
    mb = MicroBuffers(dirs, np.zeros((2, k, 3)), np.full((2, k), 1.0 if vis else 0.0),
                      np.full((2, k), vis, np.uint8), np.full((2, k), NONE), np.full((2, k, 2), np.nan))
    rec = MicroSample(np.array([0, 0, 1.0]), np.zeros(3), 0.0, 0, 1, np.array([0.0, 0.0]))
    return sc, mb, rec


def test_black_env():
    sc, mb, rec = two_surfel_scene()
    np.testing.assert_array_equal(one_bounce_indirect(rec, sc, mb, EnvironmentMap.constant(0.0)), 0)


def test_no_hit():
    sc, mb, _ = two_surfel_scene()
    rec = MicroSample(np.array([0, 0, 1.0]), np.zeros(3), 1.0, 1, NONE, np.full(2, np.nan))
    np.testing.assert_array_equal(one_bounce_indirect(rec, sc, mb, EnvironmentMap.constant(1.0)), 0)


def test_missing_secondary_buffer():
    sc, _, rec = two_surfel_scene()
    with pytest.raises(InvalidStateError):
        one_bounce_indirect(rec, sc, None, EnvironmentMap.constant(1.0))


@pytest.mark.parametrize("albedo,env", [(0.7, 1.0), (0.3, 2.5)])
def test_lambertian_furnace(albedo, env):
    sc, mb, rec = two_surfel_scene(albedo)
    out = one_bounce_indirect(rec, sc, mb, EnvironmentMap.constant(env), f0=0.0)
    np.testing.assert_allclose(out, albedo * env, rtol=0.03)


def test_secondary_occluded_is_dark():
    sc, mb, rec = two_surfel_scene(vis=0)
    np.testing.assert_array_equal(one_bounce_indirect(rec, sc, mb, EnvironmentMap.constant(1.0)), 0)


def test_batch_matches_single():
    b = make_synthetic_scene("two-plane-corner", {"n": 6, "k": 32}, seed=0)
    sc, mb = b.scene, b.microbuffers
    env = EnvironmentMap(np.random.default_rng(0).uniform(0, 2, (8, 16, 3)))
    allb = one_bounce_all(sc, mb, env)
    hits = np.argwhere(mb.first_hit != NONE)
    assert len(hits) > 0
    for i, k in hits[:: max(1, len(hits) // 20)]:
        np.testing.assert_allclose(one_bounce_indirect(mb[i][k], sc, mb, env), allb[i, k], rtol=1e-12, atol=1e-15)


def flat_grid(n=6, m=4):
    c = (np.arange(n) - (n - 1) / 2) * 0.3
    x, y = np.meshgrid(c, c)
    pos = np.stack([x.ravel(), y.ravel(), np.zeros(n * n)], axis=1)
    rng = np.random.default_rng(2)
    g = Gaussians(pos, np.tile([1, 0, 0, 0], (n * n, 1)), np.full((n * n, 2), 0.18), np.full(n * n, 0.9),
                  rng.uniform(0, 1, (n * n, 3)))
    vs = VertexSets(rng.uniform(0.1, 0.9, (n * n, m, 3)), rng.uniform(0.2, 0.9, (n * n, m)), np.zeros((n * n, m, 3)))
    env = EnvironmentMap(rng.uniform(0.2, 2.0, (8, 16, 3)))
    cam = Camera.look_at([0.3, -1.0, 2.5], [0, 0, 0], focal=40, width=32, height=32)
    sc = Scene(g, vs, env, [cam])
    return sc, bake_microbuffers(sc, k=32, seed=1)


def test_convex_scene_matches_pbr():
    sc, mb = flat_grid()
    assert (mb.first_hit == NONE).all()
    relit = relight_render(sc, mb, sc.environment, sc.cameras[0]).color
    np.testing.assert_allclose(relit, render_pbr(sc, mb, sc.cameras[0]).color, atol=1e-6)


def test_scaling_env_scales_image():
    b = make_synthetic_scene("two-plane-corner", {"n": 6, "k": 32}, seed=0)
    env = EnvironmentMap(np.random.default_rng(1).uniform(0, 2, (8, 16, 3)))
    cam = b.scene.cameras[0]
    a = relight_render(b.scene, b.microbuffers, env, cam).color
    c = relight_render(b.scene, b.microbuffers, env.scaled(2.0), cam).color
    assert np.abs(c - 2 * a).max() <= 1e-6


def test_corner_has_nonzero_indirect():
    b = make_synthetic_scene("two-plane-corner", {"n": 8, "k": 64}, seed=0)
    ind = relight_render(b.scene, b.microbuffers, EnvironmentMap.constant(1.0), b.scene.cameras[0],
                         indirect_only=True).color
    assert ind.max() > 0.01


@given(st.integers(0, 1000), st.floats(0.05, 1.0))
def test_furnace_bound(seed, albedo):
    rng = np.random.default_rng(seed)
    sc, mb, rec = two_surfel_scene(albedo, k=256)
    env = EnvironmentMap(rng.uniform(0, 3, (8, 16, 3)))
    rec = MicroSample(np.array([0, 0, 1.0]), np.zeros(3), 0.0, 0, 1, rng.uniform(-1, 1, 2))
    out = one_bounce_indirect(rec, sc, mb, env, f0=0.0)
    assert np.all(out <= albedo * env.radiance.max() * 1.05)
