"""Relighting under a new environment with one-bounce indirect illumination.

Baked indirect radiance is tied to the training lighting. For relighting, each
record that hit a secondary Gaussian is re-evaluated: the secondary's material
is interpolated at the recorded tangent coordinates and shaded with its own
baked directions and visibility under the new environment.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

from .errors import InvalidStateError
from .microbuffer import NONE, MicroBuffers, MicroSample
from .render import shade_vertices
from .scene import R_MIN, Camera, EnvironmentMap, Scene
from .shading import F0_DEFAULT, brdf_cos_nb
from .splat import RenderBuffers, rasterize_full
from .tangent import NORMAL_EPS


@njit(cache=True)
def weights_nb(u, v, m, out):
    """Vertex interpolation weights at clamped (u, v); same layouts as the numpy version."""
    u = min(max(u, -1.0), 1.0)
    v = min(max(v, -1.0), 1.0)
    if m == 1:
        out[0] = 1.0
    elif m == 2:
        out[0] = 0.5 * (1 - u)
        out[1] = 0.5 * (1 + u)
    elif m == 4:
        out[0] = 0.25 * (1 - u) * (1 - v)
        out[1] = 0.25 * (1 + u) * (1 - v)
        out[2] = 0.25 * (1 - u) * (1 + v)
        out[3] = 0.25 * (1 + u) * (1 + v)
    else:
        l0 = 0.5 * u * (u - 1)
        l1 = 1 - u * u
        l2 = 0.5 * u * (u + 1)
        for j in range(2):
            lv = 0.5 * (1 - v) if j == 0 else 0.5 * (1 + v)
            out[3 * j] = l0 * lv
            out[3 * j + 1] = l1 * lv
            out[3 * j + 2] = l2 * lv


@njit(cache=True)
def secondary_material_nb(h, u, v, albedo, rough, offsets, rots, mat):
    """Interpolated material of Gaussian h at (u, v): mat = (a0, a1, a2, r, nx, ny, nz)."""
    m = albedo.shape[1]
    w = np.empty(m)
    weights_nb(u, v, m, w)
    a = np.zeros(3)
    r = 0.0
    d = np.zeros(3)
    for i in range(m):
        for c in range(3):
            a[c] += w[i] * albedo[h, i, c]
            d[c] += w[i] * offsets[h, i, c]
        r += w[i] * rough[h, i]
    for c in range(3):
        mat[c] = min(max(a[c], 0.0), 1.0)
    mat[3] = min(max(r, R_MIN), 1.0)
    s = np.empty(3)
    for c in range(3):
        s[c] = rots[h, c, 2] + rots[h, c, 0] * d[0] + rots[h, c, 1] * d[1] + rots[h, c, 2] * d[2]
    nrm = math.sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2])
    for c in range(3):
        mat[4 + c] = s[c] / nrm if nrm >= NORMAL_EPS else rots[h, c, 2]


@njit(cache=True)
def outgoing_nb(h, mat, wx, wy, wz, dirs, l_dir, f0, out):
    """(2 pi / K) sum_k f cos L_k of Gaussian h toward w, using its baked directions."""
    k = dirs.shape[1]
    fc = np.empty(3)
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    for j in range(k):
        brdf_cos_nb(mat[0], mat[1], mat[2], mat[3], f0, mat[4], mat[5], mat[6],
                    dirs[h, j, 0], dirs[h, j, 1], dirs[h, j, 2], wx, wy, wz, fc)
        for c in range(3):
            out[c] += fc[c] * l_dir[h, j, c]
    scale = 2.0 * math.pi / k
    for c in range(3):
        out[c] *= scale


@njit(cache=True, parallel=True)
def _one_bounce_kernel(first_hit, first_uv, dirs, l_dir, albedo, rough, offsets, rots, f0, out):
    g, k = first_hit.shape
    for r in prange(g * k):
        i = r // k
        j = r - i * k
        h = first_hit[i, j]
        if h < 0:
            out[i, j, 0] = 0.0
            out[i, j, 1] = 0.0
            out[i, j, 2] = 0.0
            continue
        mat = np.empty(7)
        secondary_material_nb(h, first_uv[i, j, 0], first_uv[i, j, 1], albedo, rough, offsets, rots, mat)
        res = np.empty(3)
        outgoing_nb(h, mat, -dirs[i, j, 0], -dirs[i, j, 1], -dirs[i, j, 2], dirs, l_dir, f0, res)
        out[i, j, 0] = res[0]
        out[i, j, 1] = res[1]
        out[i, j, 2] = res[2]


def direct_incoming(mb: MicroBuffers, env: EnvironmentMap) -> np.ndarray:
    """L_dir(env, w_k) * V_k per record (G, K, 3)."""
    return env.lookup(mb.directions) * mb.vis[..., None]


def one_bounce_all(scene: Scene, mb: MicroBuffers, env: EnvironmentMap, f0: float = F0_DEFAULT) -> np.ndarray:
    """One-bounce indirect radiance for every record (G, K, 3)."""
    if mb is None or len(mb) != len(scene.gaussians):
        raise InvalidStateError("micro-buffers missing or out of sync with the scene")
    vs = scene.vertex_sets
    out = np.empty(mb.l_ind.shape)
    _one_bounce_kernel(np.ascontiguousarray(mb.first_hit), np.ascontiguousarray(mb.first_uv),
                       np.ascontiguousarray(mb.directions), direct_incoming(mb, env),
                       np.ascontiguousarray(vs.albedo), np.ascontiguousarray(vs.roughness),
                       np.ascontiguousarray(vs.normal_offset), scene.gaussians.rotations(), f0, out)
    return out


def one_bounce_indirect(record: MicroSample, scene: Scene, mb: MicroBuffers | None, new_env: EnvironmentMap,
                        f0: float = F0_DEFAULT) -> np.ndarray:
    """Radiance arriving along one record from a single reflection off its first hit."""
    h = int(record.first_hit)
    if h == NONE:
        return np.zeros(3)
    if mb is None or h >= len(mb) or mb.k == 0:
        raise InvalidStateError(f"no micro-buffer for secondary Gaussian {h}")
    vs = scene.vertex_sets
    mat = np.empty(7)
    secondary_material_nb(h, float(record.first_uv[0]), float(record.first_uv[1]), vs.albedo, vs.roughness,
                          vs.normal_offset, scene.gaussians.rotations(), mat)
    out = np.empty(3)
    w = -np.asarray(record.direction, dtype=np.float64)
    outgoing_nb(h, mat, w[0], w[1], w[2], mb.directions, direct_incoming(mb, new_env), f0, out)
    return out


def relight_incoming(scene: Scene, mb: MicroBuffers, new_env: EnvironmentMap, f0: float = F0_DEFAULT,
                     indirect_only: bool = False) -> np.ndarray:
    ind = one_bounce_all(scene, mb, new_env, f0)
    return ind if indirect_only else direct_incoming(mb, new_env) + ind


def relight_render(scene: Scene, mb: MicroBuffers, new_env: EnvironmentMap, camera: Camera,
                   f0: float = F0_DEFAULT, indirect_only: bool = False, l_in: np.ndarray | None = None) -> RenderBuffers:
    """Render under ``new_env`` with one-bounce indirect light in place of the baked indirect term."""
    if l_in is None:
        l_in = relight_incoming(scene, mb, new_env, f0, indirect_only)
    colors = shade_vertices(scene.gaussians, scene.vertex_sets, mb, camera, l_in, f0)
    bufs, _ = rasterize_full(scene.gaussians, scene.vertex_sets, camera, colors)
    return bufs
