"""Lambert + GGX BRDF and Monte Carlo vertex shading over baked hemisphere samples.

The specular lobe uses the GGX distribution with alpha = roughness^2, Schlick
Fresnel from a scalar F0 and the height-correlated Smith visibility term. F0 = 0
turns the specular lobe off entirely, leaving a pure Lambertian surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InvalidParameterError, InvalidStateError
from .microbuffer import MicroBuffer, MicroSample
from .scene import R_MIN, EnvironmentMap

F0_DEFAULT = 0.04
TWO_PI = 2.0 * math.pi


@dataclass
class BRDFParams:
    albedo: np.ndarray
    roughness: float
    f0: float = F0_DEFAULT


@dataclass
class HemisphereSamples:
    directions: np.ndarray
    pdf: float
    seed: int


def _spec_terms(nl, nv, nh, vh, a2, f0, grads=False):
    """Specular f * cos(theta_i) and its partials w.r.t. nl, nv, nh, a2.

    Inputs broadcast together; entries with nl <= 0 or nv <= 0 give zero.
    """
    valid = (nl > 0) & (nv > 0)
    nl_s = np.where(valid, nl, 1.0)
    nv_s = np.where(valid, nv, 1.0)
    nh_s = np.where(valid, nh, 1.0)
    d = nh_s * nh_s * (a2 - 1.0) + 1.0
    dist = a2 / (math.pi * d * d)
    one_m = np.clip(1.0 - vh, 0.0, 1.0)
    fres = f0 + (1.0 - f0) * one_m**5 if f0 > 0 else np.zeros_like(one_m)
    gv = np.sqrt(nv_s * nv_s * (1.0 - a2) + a2)
    gl = np.sqrt(nl_s * nl_s * (1.0 - a2) + a2)
    den = nl_s * gv + nv_s * gl
    vis = 0.5 / den
    spec = np.where(valid, dist * fres * vis * nl_s, 0.0)
    if not grads:
        return spec
    d_dist_nh = -4.0 * a2 * nh_s * (a2 - 1.0) / (math.pi * d**3)
    d_dist_a2 = (d - 2.0 * a2 * nh_s * nh_s) / (math.pi * d**3)
    d_den_nl = gv + nv_s * nl_s * (1.0 - a2) / gl
    d_den_nv = nl_s * nv_s * (1.0 - a2) / gv + gl
    d_den_a2 = nl_s * (1.0 - nv_s * nv_s) / (2.0 * gv) + nv_s * (1.0 - nl_s * nl_s) / (2.0 * gl)
    k = -vis / den
    s_nl = dist * fres * (k * d_den_nl * nl_s + vis)
    s_nv = dist * fres * nl_s * k * d_den_nv
    s_nh = d_dist_nh * fres * vis * nl_s
    s_a2 = fres * nl_s * (d_dist_a2 * vis + dist * k * d_den_a2)
    z = np.zeros_like(spec)
    return (spec, np.where(valid, s_nl, z), np.where(valid, s_nv, z),
            np.where(valid, s_nh, z), np.where(valid, s_a2, z))


def _half(wi, wo):
    h = wi + wo
    return h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-300)


def brdf_eval(params: BRDFParams, n, wi, wo) -> np.ndarray:
    """BRDF value (1/sr) for one pair of directions; zero below either horizon."""
    n, wi, wo = (np.asarray(x, dtype=np.float64) for x in (n, wi, wo))
    nl = float(n @ wi)
    nv = float(n @ wo)
    albedo = np.asarray(params.albedo, dtype=np.float64) * np.ones(3)
    if nl <= 0 or nv <= 0:
        return np.zeros(3)
    h = _half(wi, wo)
    a2 = params.roughness**4
    spec = _spec_terms(np.array(nl), np.array(nv), np.array(float(n @ h)), np.array(float(wo @ h)),
                       a2, params.f0)
    return albedo / math.pi + float(spec) / nl


def orthonormal_frame(n: np.ndarray):
    """Tangent vectors (t, b) completing unit normals (..., 3) to right-handed frames."""
    sign = np.where(n[..., 2] >= 0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t = np.stack([1.0 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], axis=-1)
    bt = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], axis=-1)
    return t, bt


def hemisphere_directions(normals: np.ndarray, k: int, seed: int) -> np.ndarray:
    """K area-uniform directions on the hemisphere of each normal: (G, 3) -> (G, K, 3).

    Latin-hypercube stratified in (cos theta, phi); every direction is still
    marginally uniform with pdf 1/(2 pi).
    """
    if k < 1:
        raise InvalidParameterError("sample count K must be >= 1")
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    g = normals.shape[0]
    rng = np.random.default_rng(seed)
    base = np.broadcast_to(np.arange(k), (g, k))
    perm = rng.permuted(base, axis=1)
    cos_t = (perm + rng.random((g, k))) / k
    phi = TWO_PI * (base + rng.random((g, k))) / k
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t**2))
    t, b = orthonormal_frame(normals)
    d = ((sin_t * np.cos(phi))[..., None] * t[:, None, :]
         + (sin_t * np.sin(phi))[..., None] * b[:, None, :]
         + cos_t[..., None] * normals[:, None, :])
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def sample_hemisphere(normal, k: int, seed: int) -> HemisphereSamples:
    dirs = hemisphere_directions(np.asarray(normal, dtype=np.float64)[None], k, seed)[0]
    return HemisphereSamples(dirs, 1.0 / TWO_PI, seed)


def incoming_radiance(entry: MicroSample, env: EnvironmentMap) -> np.ndarray:
    """Direct environment radiance gated by visibility plus the baked indirect term."""
    direct = env.lookup(np.asarray(entry.direction)[None])[0]
    return direct * entry.vis + np.asarray(entry.l_ind)


def incoming_radiance_all(directions, vis, l_ind, env: EnvironmentMap) -> np.ndarray:
    return env.lookup(directions) * vis[..., None] + l_ind


def shade(dirs, l_in, albedo, roughness, normals, wo, f0=F0_DEFAULT, grads=False):
    """Vertex shading for G Gaussians with M vertices each.

    dirs, l_in: (G, K, 3) sample directions and incoming radiance (shared by the
    Gaussian's vertices); albedo (G, M, 3); roughness (G, M); normals (G, M, 3);
    wo (G, 3) unit outgoing direction. Returns colors (G, M, 3) and, with
    ``grads``, a closure mapping d loss/d colors to d loss/d (albedo, roughness, normals).
    """
    k = dirs.shape[1]
    nl = np.einsum("gmc,gkc->gmk", normals, dirs)
    nv = np.einsum("gmc,gc->gm", normals, wo)[:, :, None]
    h = _half(dirs, wo[:, None, :])  # (G, K, 3)
    nh = np.einsum("gmc,gkc->gmk", normals, h)
    vh = np.einsum("gkc,gc->gk", h, wo)[:, None, :]
    a2 = (roughness**4)[:, :, None]
    pos = (nl > 0) & (nv > 0)
    cos_d = np.where(pos, nl, 0.0)
    scale = TWO_PI / k
    diffuse_w = np.einsum("gmk,gkc->gmc", cos_d, l_in) * (scale / math.pi)
    terms = _spec_terms(nl, nv, nh, vh, a2, f0, grads=grads)
    spec = terms[0] if grads else terms
    colors = albedo * diffuse_w + scale * np.einsum("gmk,gkc->gmc", spec, l_in)
    if not grads:
        return colors
    _, s_nl, s_nv, s_nh, s_a2 = terms

    def backward(g_col):
        g_alb = g_col * diffuse_w
        gl = np.einsum("gmc,gkc->gmk", g_col, l_in)  # (G, M, K) = L_k . g
        g_rough = scale * np.einsum("gmk,gmk->gm", s_a2, gl) * 4.0 * roughness**3
        gl_alb = np.einsum("gmc,gkc->gmk", g_col * albedo, l_in) / math.pi
        coef_l = np.where(pos, gl_alb, 0.0) + s_nl * gl
        g_n = scale * (np.einsum("gmk,gkc->gmc", coef_l, dirs)
                       + np.einsum("gmk->gm", s_nv * gl)[:, :, None] * wo[:, None, :]
                       + np.einsum("gmk,gkc->gmc", s_nh * gl, h))
        return g_alb, g_rough, g_n

    return colors, backward


def vertex_shade(normal, material: BRDFParams, micro_buffer: MicroBuffer, env: EnvironmentMap, wo) -> np.ndarray:
    """Outgoing radiance of one Gaussian vertex toward ``wo``."""
    if micro_buffer is None or len(micro_buffer) == 0:
        raise InvalidStateError("vertex shading needs a non-empty micro-buffer")
    l_in = incoming_radiance_all(micro_buffer.directions, micro_buffer.vis, micro_buffer.l_ind, env)
    out = shade(micro_buffer.directions[None], l_in[None],
                np.asarray(material.albedo, dtype=np.float64).reshape(1, 1, 3) * np.ones((1, 1, 3)),
                np.array([[max(material.roughness, R_MIN)]]),
                np.asarray(normal, dtype=np.float64).reshape(1, 1, 3),
                np.asarray(wo, dtype=np.float64).reshape(1, 3), material.f0)
    return out[0, 0]


@njit(cache=True)
def brdf_cos_nb(a0, a1, a2c, rough, f0, nx, ny, nz, lx, ly, lz, vx, vy, vz, out):
    """f(l, v) * max(0, n.l) for one direction pair, written into ``out`` (3,)."""
    nl = nx * lx + ny * ly + nz * lz
    nv = nx * vx + ny * vy + nz * vz
    if nl <= 0.0 or nv <= 0.0:
        out[0] = 0.0
        out[1] = 0.0
        out[2] = 0.0
        return
    hx = lx + vx
    hy = ly + vy
    hz = lz + vz
    hn = math.sqrt(hx * hx + hy * hy + hz * hz)
    spec = 0.0
    if f0 > 0.0 and hn > 0.0:
        hx /= hn
        hy /= hn
        hz /= hn
        nh = nx * hx + ny * hy + nz * hz
        vh = vx * hx + vy * hy + vz * hz
        a2 = rough * rough * rough * rough
        d = nh * nh * (a2 - 1.0) + 1.0
        dist = a2 / (math.pi * d * d)
        om = min(max(1.0 - vh, 0.0), 1.0)
        fres = f0 + (1.0 - f0) * om**5
        gv = math.sqrt(nv * nv * (1.0 - a2) + a2)
        gl = math.sqrt(nl * nl * (1.0 - a2) + a2)
        vis = 0.5 / (nl * gv + nv * gl)
        spec = dist * fres * vis * nl
    out[0] = a0 * nl / math.pi + spec
    out[1] = a1 * nl / math.pi + spec
    out[2] = a2c * nl / math.pi + spec
