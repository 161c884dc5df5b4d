"""Physically-based rendering of a scene: shade every Gaussian vertex, then splat."""

from __future__ import annotations

import numpy as np

from .errors import InvalidStateError
from .microbuffer import MicroBuffers
from .scene import R_MIN, Camera, EnvironmentMap, Gaussians, Scene, VertexSets
from .shading import F0_DEFAULT, incoming_radiance_all, shade
from .splat import RenderBuffers, rasterize_full
from .tangent import normals_from_offsets, offset_grad


def vertex_normals(gaussians: Gaussians, vertex_sets: VertexSets):
    """World shading normals at every vertex (G, M, 3) and the pre-normalization norms."""
    rots = gaussians.rotations()
    m = vertex_sets.count
    return normals_from_offsets(np.broadcast_to(rots[:, None], (len(gaussians), m, 3, 3)),
                                vertex_sets.normal_offset)


def view_directions(positions: np.ndarray, camera: Camera) -> np.ndarray:
    d = camera.center[None, :] - positions
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def incoming(mb: MicroBuffers, env: EnvironmentMap) -> np.ndarray:
    """Baked incoming radiance per sample (G, K, 3): direct gated by V plus indirect."""
    return incoming_radiance_all(mb.directions, mb.vis, mb.l_ind, env)


def shade_vertices(gaussians: Gaussians, vertex_sets: VertexSets, mb: MicroBuffers, camera: Camera,
                   l_in: np.ndarray, f0: float = F0_DEFAULT, grads: bool = False):
    """Vertex colors (G, M, 3) toward the camera.

    With ``grads`` also returns a closure mapping d loss/d colors to a dict of
    vertex-attribute gradients (albedo, roughness, normal_offset).
    """
    if mb is None or len(mb) != len(gaussians):
        raise InvalidStateError("micro-buffers missing or out of sync with the scene")
    alb_raw = vertex_sets.albedo
    rgh_raw = vertex_sets.roughness
    alb = np.clip(alb_raw, 0.0, 1.0)
    rgh = np.clip(rgh_raw, R_MIN, 1.0)
    normals, raw = vertex_normals(gaussians, vertex_sets)
    wo = view_directions(gaussians.positions, camera)
    res = shade(mb.directions, l_in, alb, rgh, normals, wo, f0, grads=grads)
    if not grads:
        return res
    colors, back = res
    rots = gaussians.rotations()[:, None]

    def backward(g_col):
        g_a, g_r, g_n = back(g_col)
        return {
            "albedo": np.where((alb_raw >= 0) & (alb_raw <= 1), g_a, 0.0),
            "roughness": np.where((rgh_raw >= R_MIN) & (rgh_raw <= 1), g_r, 0.0),
            "normal_offset": offset_grad(rots, normals, raw, g_n),
        }

    return colors, backward


def render_pbr(scene: Scene, mb: MicroBuffers, camera: Camera, env: EnvironmentMap | None = None,
               f0: float = F0_DEFAULT, l_in: np.ndarray | None = None) -> RenderBuffers:
    """Standard render: baked visibility and indirect radiance under ``env`` (default: the scene's)."""
    if l_in is None:
        l_in = incoming(mb, scene.environment if env is None else env)
    colors = shade_vertices(scene.gaussians, scene.vertex_sets, mb, camera, l_in, f0)
    bufs, _ = rasterize_full(scene.gaussians, scene.vertex_sets, camera, colors)
    return bufs


def radiance_colors(gaussians: Gaussians, m: int, camera: Camera) -> np.ndarray:
    """Per-vertex colors from the radiance field alone (used by the pre-fit stage)."""
    c = gaussians.radiance_toward(view_directions(gaussians.positions, camera))
    return np.broadcast_to(c[:, None, :], (len(gaussians), m, 3)).copy()


def render_radiance(scene: Scene, camera: Camera) -> RenderBuffers:
    colors = radiance_colors(scene.gaussians, scene.vertex_sets.count, camera)
    bufs, _ = rasterize_full(scene.gaussians, scene.vertex_sets, camera, colors)
    return bufs
