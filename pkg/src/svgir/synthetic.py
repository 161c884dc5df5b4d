"""Desk-scale synthetic scenes with known materials and ground-truth renders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError
from .microbuffer import MicroBuffers
from .raytrace import bake_microbuffers, build_bvh
from .render import incoming, render_pbr, vertex_normals
from .scene import R_MIN, VERTEX_LAYOUTS, Camera, EnvironmentMap, Gaussians, Scene, VertexSets, quat_aligning_z
from .shading import F0_DEFAULT, shade
from .splat import RenderBuffers
from .tangent import TANGENT_OFFSET

KINDS = ("single-surfel", "two-plane-corner", "occluder-dome", "sphere-shell")


@dataclass
class SyntheticBundle:
    scene: Scene
    microbuffers: MicroBuffers
    attributes: list  # ground-truth RenderBuffers per camera
    params: dict = field(default_factory=dict)


def sky_environment(height: int = 32, width: int = 64, sun_dir=(0.5, -0.3, 0.8), sun_power: float = 4.0,
                    sun_width: float = 0.25, sky=(0.25, 0.3, 0.4), ground=(0.15, 0.12, 0.1)) -> EnvironmentMap:
    """Smooth sky/ground gradient plus a broad warm lobe toward ``sun_dir``."""
    theta = (np.arange(height) + 0.5) / height * math.pi
    phi = (np.arange(width) + 0.5) / width * 2 * math.pi - math.pi
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    d = np.stack(np.broadcast_arrays(st * np.cos(phi)[None], st * np.sin(phi)[None], ct), axis=-1)
    up = np.clip(d[..., 2:3], 0.0, 1.0)
    base = np.asarray(ground) + (np.asarray(sky) - np.asarray(ground)) * (0.5 + 0.5 * d[..., 2:3])
    base = base + 0.3 * up
    s = np.asarray(sun_dir, dtype=np.float64)
    s /= np.linalg.norm(s)
    lobe = np.exp((d @ s - 1.0) / sun_width)[..., None]
    return EnvironmentMap(base + sun_power * lobe * np.array([1.0, 0.9, 0.75]))


def _vertex_positions(gaussians: Gaussians, m: int) -> np.ndarray:
    """World positions (N, M, 3) of the vertex layout on each surfel."""
    rot = gaussians.rotations()
    uv = np.asarray(VERTEX_LAYOUTS[m], dtype=np.float64)
    su = gaussians.scales[:, 0:1] + TANGENT_OFFSET
    sv = gaussians.scales[:, 1:2] + TANGENT_OFFSET
    return (gaussians.positions[:, None]
            + (uv[None, :, 0] * su)[..., None] * rot[:, None, :, 0]
            + (uv[None, :, 1] * sv)[..., None] * rot[:, None, :, 1])


def _finish(gaussians, vertex_sets, env, cameras, k, seed, f0, params, radiance=None) -> SyntheticBundle:
    """Derive a radiance field from the materials, bake, and render ground truth."""
    if radiance is None:
        # view-independent stand-in: vertex-averaged shading toward the normal, visibility only
        g0 = Gaussians(gaussians.positions, gaussians.quaternions, gaussians.scales, gaussians.opacities,
                       np.zeros((len(gaussians), 3)))
        mb0 = bake_microbuffers(g0, build_bvh(g0), k, seed)
        normals, _ = vertex_normals(g0, vertex_sets)
        cols = shade(mb0.directions, incoming(mb0, env), np.clip(vertex_sets.albedo, 0, 1),
                     np.clip(vertex_sets.roughness, R_MIN, 1), normals, g0.normals(), f0)
        radiance = cols.mean(axis=1)
    g = Gaussians(gaussians.positions, gaussians.quaternions, gaussians.scales, gaussians.opacities, radiance)
    mb = bake_microbuffers(g, build_bvh(g), k, seed)
    scene = Scene(g, vertex_sets, env, list(cameras), [])
    attrs = []
    for cam in cameras:
        bufs = render_pbr(scene, mb, cam, f0=f0)
        scene.images.append(bufs.color)
        attrs.append(bufs)
    return SyntheticBundle(scene, mb, attrs, params)


def _orbit_cameras(n, radius, target, focal, res, seed):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    ang = math.pi * (3.0 - math.sqrt(5.0)) * i
    r = np.sqrt(1.0 - z * z)
    dirs = np.stack([r * np.cos(ang), r * np.sin(ang), z], axis=1)
    return [Camera.look_at(np.asarray(target) + radius * d, target, focal=focal, width=res, height=res)
            for d in dirs]


def make_synthetic_scene(kind: str, params: dict | None = None, seed: int = 0) -> SyntheticBundle:
    """Build a fixture with known materials and its ground-truth renders.

    kinds: single-surfel, two-plane-corner, occluder-dome, sphere-shell. Common
    params: k (samples, default 64), m (vertices, default 4), res, f0.
    """
    p = dict(params or {})
    k = int(p.get("k", 64))
    m = int(p.get("m", 4))
    f0 = float(p.get("f0", F0_DEFAULT))
    rng = np.random.default_rng(seed)
    kind = kind.replace("_", "-")
    if kind == "single-surfel":
        res = int(p.get("res", 32))
        s = float(p.get("scale", 1.0))
        albedo = np.broadcast_to(np.asarray(p.get("albedo", 0.6), dtype=np.float64), (3,))
        g = Gaussians([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0, 0.0]], [[s, s]], [1.0], [albedo])
        vs = VertexSets.uniform(1, m, albedo, float(p.get("roughness", 0.5)))
        env = EnvironmentMap.constant(p.get("env", 1.0))
        cam = Camera.look_at([0, 0, 4.0 * s], [0, 0, 0], up=(0, 1, 0), focal=res * 0.6, width=res, height=res)
        return _finish(g, vs, env, [cam], k, seed, f0, p, radiance=np.asarray(albedo)[None] * 1.0)
    if kind == "two-plane-corner":
        n = int(p.get("n", 16))
        size = float(p.get("size", 2.0))
        res = int(p.get("res", 64))
        h = size / n
        c = (np.arange(n) + 0.5) * h
        a, b = np.meshgrid(c, c - size / 2, indexing="ij")
        floor = np.stack([a.ravel(), b.ravel(), np.zeros(n * n)], axis=1)
        wall = np.stack([np.zeros(n * n), b.ravel(), a.ravel()], axis=1)
        q_floor = np.tile([1.0, 0.0, 0.0, 0.0], (n * n, 1))
        q_wall = np.tile(quat_aligning_z([1.0, 0.0, 0.0]), (n * n, 1))
        s = float(p.get("scale_ratio", 0.6)) * h
        g = Gaussians(np.concatenate([floor, wall]), np.concatenate([q_floor, q_wall]),
                      np.full((2 * n * n, 2), s), np.ones(2 * n * n), np.zeros((2 * n * n, 3)))
        alb = np.concatenate([np.tile(p.get("floor_albedo", [0.8, 0.8, 0.8]), (n * n, 1)),
                              np.tile(p.get("wall_albedo", [0.8, 0.4, 0.3]), (n * n, 1))])
        vs = VertexSets(np.repeat(alb[:, None], m, axis=1), np.full((2 * n * n, m), float(p.get("roughness", 0.6))),
                        np.zeros((2 * n * n, m, 3)))
        env = EnvironmentMap.constant(p.get("env", 1.0))
        cam = Camera.look_at([2.2 * size, -0.9 * size, 1.6 * size], [0.25 * size, 0.0, 0.25 * size],
                             focal=res * 1.1, width=res, height=res)
        return _finish(g, vs, env, [cam], k, seed, f0, p)
    if kind == "occluder-dome":
        layers = int(p.get("layers", 3))
        count = int(p.get("dome_count", 300))
        emit = np.broadcast_to(np.asarray(p.get("radiance", [1.0, 0.8, 0.6]), dtype=np.float64), (3,))
        pos, quats, scl = [[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0, 0.0]], [[0.05, 0.05]]
        for layer in range(layers):
            r = 1.0 + 0.15 * layer
            i = np.arange(count) + 0.5
            z = i / count * 1.2 - 0.2  # covers slightly below the horizon
            ang = math.pi * (3.0 - math.sqrt(5.0)) * i + layer
            rr = np.sqrt(1.0 - z * z)
            d = np.stack([rr * np.cos(ang), rr * np.sin(ang), z], axis=1)
            spacing = r * math.sqrt(2 * math.pi * 1.2 / count)
            for dd in d:
                pos.append(r * dd)
                quats.append(quat_aligning_z(-dd))
                scl.append([0.7 * spacing, 0.7 * spacing])
        nn = len(pos)
        rad = np.tile(emit, (nn, 1))
        rad[0] = 0.0
        g = Gaussians(pos, quats, scl, np.ones(nn), rad)
        vs = VertexSets.uniform(nn, m, 0.5, 0.5)
        env = EnvironmentMap.constant(p.get("env", 1.0))
        cam = Camera.look_at([0, -0.01, 0.6], [0, 0, 0], focal=16, width=16, height=16)
        return _finish(g, vs, env, [cam], k, seed, f0, p, radiance=rad)
    if kind == "sphere-shell":
        n = int(p.get("n", 500))
        res = int(p.get("res", 128))
        views = int(p.get("views", 16))
        radius = 1.0
        i = np.arange(n) + 0.5
        z = 1.0 - 2.0 * i / n
        ang = math.pi * (3.0 - math.sqrt(5.0)) * i
        rr = np.sqrt(1.0 - z * z)
        d = np.stack([rr * np.cos(ang), rr * np.sin(ang), z], axis=1)
        spacing = radius * math.sqrt(4 * math.pi / n)
        s = float(p.get("scale_ratio", 0.6)) * spacing
        quats = np.array([quat_aligning_z(dd) for dd in d])
        g = Gaussians(radius * d, quats, np.full((n, 2), s), np.full(n, 0.95), np.zeros((n, 3)))
        vpos = _vertex_positions(g, m)
        phase = rng.uniform(0, 2 * math.pi, 6)
        alb = 0.5 + 0.3 * np.stack([np.sin(2.0 * vpos[..., 0] + phase[0]) * np.cos(1.5 * vpos[..., 2] + phase[1]),
                                    np.sin(2.5 * vpos[..., 1] + phase[2]),
                                    np.cos(2.0 * vpos[..., 2] + phase[3]) * np.sin(1.5 * vpos[..., 0] + phase[4])],
                                   axis=-1)
        rough = 0.5 + 0.2 * np.sin(2.0 * vpos[..., 0] + 1.5 * vpos[..., 1] + phase[5])
        vs = VertexSets(alb, rough, np.zeros((n, m, 3)))
        env = sky_environment(sun_power=float(p.get("sun_power", 4.0)))
        cams = _orbit_cameras(views, float(p.get("distance", 3.2)), [0.0, 0.0, 0.0],
                              float(p.get("focal", 160.0)) * res / 128, res, seed)
        return _finish(g, vs, env, cams, k, seed, f0, p)
    raise InvalidParameterError(f"unknown fixture kind {kind!r}; expected one of {KINDS}")


def attribute_maps(bufs: RenderBuffers, threshold: float = 0.5):
    """Alpha-normalized albedo/roughness maps and the foreground mask."""
    fg = bufs.alpha > threshold
    a = np.where(fg, bufs.alpha, 1.0)
    return bufs.albedo / a[..., None], bufs.roughness / a, fg
