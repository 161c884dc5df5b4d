"""Slow reference renderers used to validate the main pipeline.

``reference_one_bounce`` is a brute-force path tracer over the same analytic
disks as the ray tracer but shares none of its machinery: no BVH, no baked
buffers, no splatting. Each pixel composites the exact ray-disk hits along the
camera ray and estimates direct light plus one bounce at every hit point by
uniform hemisphere sampling, with visibility from exact transmittance.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange, uint64

from .errors import InvalidParameterError
from .microbuffer import MicroBuffers
from .raytrace import T_MIN, VIS_THRESHOLD, bake_microbuffers, gaussian_disks
from .relight import secondary_material_nb
from .render import incoming, shade_vertices
from .scene import Camera, EnvironmentMap, Scene, _env_texel
from .shading import F0_DEFAULT, brdf_cos_nb
from .splat import ALPHA_MAX, ALPHA_MIN, T_STOP, generate_fragments
from .tangent import TANGENT_OFFSET

MODES = {"full": 0, "direct": 1, "indirect": 2}
_GOLDEN = uint64(0x9E3779B97F4A7C15)
_M1 = uint64(0xBF58476D1CE4E5B9)
_M2 = uint64(0x94D049BB133111EB)


@njit(cache=True)
def _mix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> uint64(30))) * _M1
    z = (z ^ (z >> uint64(27))) * _M2
    return z ^ (z >> uint64(31))


@njit(cache=True)
def _uniform(seed, a, b, c, d):
    """Counter-based uniform in [0, 1) from five integer coordinates."""
    z = _mix(uint64(seed))
    z = _mix(z ^ uint64(a))
    z = _mix(z ^ uint64(b))
    z = _mix(z ^ uint64(c))
    z = _mix(z ^ uint64(d))
    return float(z >> uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _hemisphere(nx, ny, nz, u1, u2, out):
    """Area-uniform direction about n from two uniforms (u1 -> cos theta)."""
    sign = 1.0 if nz >= 0.0 else -1.0
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    tx, ty, tz = 1.0 + sign * nx * nx * a, sign * b, -sign * nx
    bx, by, bz = b, sign + ny * ny * a, -ny
    ct = u1
    st = math.sqrt(max(0.0, 1.0 - ct * ct))
    phi = 2.0 * math.pi * u2
    cp = st * math.cos(phi)
    sp = st * math.sin(phi)
    x = cp * tx + sp * bx + ct * nx
    y = cp * ty + sp * by + ct * ny
    z = cp * tz + sp * bz + ct * nz
    inv = 1.0 / math.sqrt(x * x + y * y + z * z)
    out[0] = x * inv
    out[1] = y * inv
    out[2] = z * inv


@njit(cache=True)
def _hit(g, ox, oy, oz, dx, dy, dz, centers, tu, tv, normals, scales):
    """Exact ray-disk test: (hit, t, x, y) with 3-sigma elliptical support."""
    nd = normals[g, 0] * dx + normals[g, 1] * dy + normals[g, 2] * dz
    if nd == 0.0:
        return False, 0.0, 0.0, 0.0
    t = (normals[g, 0] * (centers[g, 0] - ox) + normals[g, 1] * (centers[g, 1] - oy)
         + normals[g, 2] * (centers[g, 2] - oz)) / nd
    if t <= T_MIN:
        return False, 0.0, 0.0, 0.0
    px = ox + t * dx - centers[g, 0]
    py = oy + t * dy - centers[g, 1]
    pz = oz + t * dz - centers[g, 2]
    x = px * tu[g, 0] + py * tu[g, 1] + pz * tu[g, 2]
    y = px * tv[g, 0] + py * tv[g, 1] + pz * tv[g, 2]
    qx = x / (3.0 * scales[g, 0])
    qy = y / (3.0 * scales[g, 1])
    if qx * qx + qy * qy > 1.0:
        return False, 0.0, 0.0, 0.0
    return True, t, x, y


@njit(cache=True)
def _alpha(g, x, y, scales, opac):
    qx = x / scales[g, 0]
    qy = y / scales[g, 1]
    return min(opac[g] * math.exp(-0.5 * (qx * qx + qy * qy)), ALPHA_MAX)


@njit(cache=True)
def _transmittance(ox, oy, oz, dx, dy, dz, skip, centers, tu, tv, normals, scales, opac):
    """Product of (1 - alpha) over every disk crossed by the ray."""
    tr = 1.0
    for g in range(centers.shape[0]):
        if g == skip:
            continue
        ok, t, x, y = _hit(g, ox, oy, oz, dx, dy, dz, centers, tu, tv, normals, scales)
        if ok:
            tr *= 1.0 - _alpha(g, x, y, scales, opac)
    return tr


@njit(cache=True)
def _first(ox, oy, oz, dx, dy, dz, skip, centers, tu, tv, normals, scales):
    best = -1
    bt = np.inf
    bx = 0.0
    by = 0.0
    for g in range(centers.shape[0]):
        if g == skip:
            continue
        ok, t, x, y = _hit(g, ox, oy, oz, dx, dy, dz, centers, tu, tv, normals, scales)
        if ok and t < bt:
            best, bt, bx, by = g, t, x, y
    return best, bt, bx, by


@njit(cache=True)
def _env(env, x, y, z, out):
    c = _env_texel(env, x, y, z)
    out[0] = c[0]
    out[1] = c[1]
    out[2] = c[2]


@njit(cache=True)
def _shade_point(pix, frag, g, px, py, pz, lx, ly, tu, tv, normals, centers, scales, opac,
                 albedo, rough, offsets, rots, env, wx, wy, wz, spp, seed, mode, f0, out):
    """Monte Carlo outgoing radiance at a point on disk g toward w."""
    mat = np.empty(7)
    secondary_material_nb(g, lx / (scales[g, 0] + TANGENT_OFFSET), ly / (scales[g, 1] + TANGENT_OFFSET),
                          albedo, rough, offsets, rots, mat)
    nx, ny, nz = normals[g, 0], normals[g, 1], normals[g, 2]
    strata = int(math.sqrt(spp))
    grid = strata * strata == spp
    d = np.empty(3)
    d2 = np.empty(3)
    fc = np.empty(3)
    fc2 = np.empty(3)
    le = np.empty(3)
    mat2 = np.empty(7)
    acc = np.zeros(3)
    two_pi = 2.0 * math.pi
    for s in range(spp):
        u1 = _uniform(seed, pix, frag, s, 0)
        u2 = _uniform(seed, pix, frag, s, 1)
        if grid:
            u1 = ((s // strata) + u1) / strata
            u2 = ((s % strata) + u2) / strata
        _hemisphere(nx, ny, nz, u1, u2, d)
        brdf_cos_nb(mat[0], mat[1], mat[2], mat[3], f0, mat[4], mat[5], mat[6],
                    d[0], d[1], d[2], wx, wy, wz, fc)
        if fc[0] == 0.0 and fc[1] == 0.0 and fc[2] == 0.0:
            continue
        if mode != 2:
            tr = _transmittance(px, py, pz, d[0], d[1], d[2], g, centers, tu, tv, normals, scales, opac)
            if tr > VIS_THRESHOLD:
                _env(env, d[0], d[1], d[2], le)
                for c in range(3):
                    acc[c] += two_pi * fc[c] * le[c]
        if mode == 1:
            continue
        h, t, hx, hy = _first(px, py, pz, d[0], d[1], d[2], g, centers, tu, tv, normals, scales)
        if h < 0:
            continue
        qx = px + t * d[0]
        qy = py + t * d[1]
        qz = pz + t * d[2]
        secondary_material_nb(h, hx / (scales[h, 0] + TANGENT_OFFSET), hy / (scales[h, 1] + TANGENT_OFFSET),
                              albedo, rough, offsets, rots, mat2)
        _hemisphere(normals[h, 0], normals[h, 1], normals[h, 2],
                    _uniform(seed, pix, frag, s, 2), _uniform(seed, pix, frag, s, 3), d2)
        brdf_cos_nb(mat2[0], mat2[1], mat2[2], mat2[3], f0, mat2[4], mat2[5], mat2[6],
                    d2[0], d2[1], d2[2], -d[0], -d[1], -d[2], fc2)
        if fc2[0] == 0.0 and fc2[1] == 0.0 and fc2[2] == 0.0:
            continue
        tr2 = _transmittance(qx, qy, qz, d2[0], d2[1], d2[2], h, centers, tu, tv, normals, scales, opac)
        if tr2 > VIS_THRESHOLD:
            _env(env, d2[0], d2[1], d2[2], le)
            for c in range(3):
                acc[c] += two_pi * fc[c] * two_pi * fc2[c] * le[c]
    for c in range(3):
        out[c] = acc[c] / spp


@njit(cache=True, parallel=True)
def _render(pixels, rays, cam_o, centers, tu, tv, normals, scales, opac, albedo, rough, offsets, rots,
            env, spp, seed, mode, f0, background, out):
    n = centers.shape[0]
    for i in prange(pixels.shape[0]):
        p = pixels[i]
        dx, dy, dz = rays[p, 0], rays[p, 1], rays[p, 2]
        ts = np.empty(n)
        gs = np.empty(n, np.int64)
        xs = np.empty(n)
        ys = np.empty(n)
        cnt = 0
        for g in range(n):
            ok, t, x, y = _hit(g, cam_o[0], cam_o[1], cam_o[2], dx, dy, dz, centers, tu, tv, normals, scales)
            if ok:
                ts[cnt] = t
                gs[cnt] = g
                xs[cnt] = x
                ys[cnt] = y
                cnt += 1
        order = np.argsort(ts[:cnt], kind="mergesort")
        acc = np.zeros(3)
        lo = np.empty(3)
        tr = 1.0
        frag = 0
        for j in range(cnt):
            if tr < T_STOP:
                break
            k = order[j]
            g = gs[k]
            a = _alpha(g, xs[k], ys[k], scales, opac)
            if a < ALPHA_MIN:
                continue
            t = ts[k]
            _shade_point(p, frag, g, cam_o[0] + t * dx, cam_o[1] + t * dy, cam_o[2] + t * dz, xs[k], ys[k],
                         tu, tv, normals, centers, scales, opac, albedo, rough, offsets, rots, env,
                         -dx, -dy, -dz, spp, seed, mode, f0, lo)
            for c in range(3):
                acc[c] += tr * a * lo[c]
            tr *= 1.0 - a
            frag += 1
        if background:
            _env(env, dx, dy, dz, lo)
            for c in range(3):
                acc[c] += tr * lo[c]
        for c in range(3):
            out[i, c] = acc[c]


def reference_one_bounce(scene: Scene, env: EnvironmentMap | None, camera: Camera, spp: int, seed: int = 0,
                         mode: str = "full", pixel_mask=None, f0: float = F0_DEFAULT,
                         background: bool = True) -> np.ndarray:
    """Brute-force direct + one-bounce render (H, W, 3); pixels outside ``pixel_mask`` are left at 0."""
    if spp < 1:
        raise InvalidParameterError("spp must be >= 1")
    if mode not in MODES:
        raise InvalidParameterError(f"unknown mode {mode!r}")
    env = scene.environment if env is None else env
    h, w = camera.height, camera.width
    mask = np.ones((h, w), bool) if pixel_mask is None else np.asarray(pixel_mask, bool)
    pixels = np.flatnonzero(mask).astype(np.int64)
    rays = np.ascontiguousarray(camera.world_rays().reshape(-1, 3))
    out = np.zeros((pixels.size, 3))
    n = len(scene.gaussians)
    if n == 0:
        img = np.zeros((h * w, 3))
        if background:
            img[pixels] = env.lookup(rays[pixels])
        return img.reshape(h, w, 3)
    disks = gaussian_disks(scene.gaussians)
    vs = scene.vertex_sets
    _render(pixels, rays, camera.center, disks.centers, disks.tu, disks.tv, disks.normals, disks.scales,
            disks.opacities, np.ascontiguousarray(vs.albedo), np.ascontiguousarray(vs.roughness),
            np.ascontiguousarray(vs.normal_offset), scene.gaussians.rotations(), env.radiance,
            int(spp), int(seed), MODES[mode], float(f0), bool(background), out)
    img = np.zeros((h * w, 3))
    img[pixels] = out
    return img.reshape(h, w, 3)


def reference_constant_render(scene: Scene, camera: Camera, env: EnvironmentMap | None = None,
                              mb: MicroBuffers | None = None, f0: float = F0_DEFAULT, k: int = 64,
                              seed: int = 0) -> np.ndarray:
    """Render an M=1 scene by shading each Gaussian once and blending pixel by pixel."""
    if scene.vertex_sets.count != 1:
        raise InvalidParameterError(f"constant-Gaussian reference needs M=1, got M={scene.vertex_sets.count}")
    env = scene.environment if env is None else env
    if mb is None:
        mb = bake_microbuffers(scene.gaussians, None, k, seed)
    colors = shade_vertices(scene.gaussians, scene.vertex_sets, mb, camera, incoming(mb, env), f0)[:, 0]
    fr = generate_fragments(scene.gaussians, camera)
    img = np.zeros((fr.height * fr.width, 3))
    for p in range(fr.height * fr.width):
        acc = np.zeros(3)
        for f in range(fr.offsets[p], fr.offsets[p + 1]):
            acc = acc + (fr.trans[f] * fr.alpha[f]) * colors[fr.gid[f]]
        img[p] = acc
    return img.reshape(fr.height, fr.width, 3)
