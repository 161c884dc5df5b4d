"""Training objective: photometric, smoothness, normal and radiance-consistency terms.

Each loss returns its value and, when asked, the gradient w.r.t. its inputs so
the trainer can chain them through the splatting and shading backward passes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidParameterError, NumericError
from .microbuffer import NONE, MicroBuffer, MicroBuffers
from .scene import R_MIN, Camera, EnvironmentMap, Gaussians, VertexSets
from .shading import F0_DEFAULT, shade
from .tangent import interpolate, normals_from_offsets, offset_grad, vertex_weights

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LUMA = np.array([0.2126, 0.7152, 0.0722])
COMPONENTS = ("l1", "ssim", "rc", "n", "tv_albedo", "tv_roughness", "reg_n")


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.9
    ssim: float = 0.1
    rc: float = 0.05
    n: float = 0.02
    tv_albedo: float = 0.1
    tv_roughness: float = 0.05
    reg_n: float = 0.01

    def __post_init__(self):
        for name, w in asdict(self).items():
            if not w >= 0:
                raise InvalidParameterError(f"loss weight {name} must be >= 0, got {w}")

    def as_dict(self) -> dict:
        return asdict(self)


def total_loss(components: dict, weights: LossWeights | None = None) -> float:
    """Weighted sum of the loss components; missing components count as 0."""
    weights = weights or LossWeights()
    terms = []
    for name, w in weights.as_dict().items():
        v = float(components.get(name, 0.0))
        if not math.isfinite(v):
            raise NumericError(f"loss component '{name}' is not finite ({v})")
        terms.append(w * v)
    return math.fsum(terms)  # correctly rounded, so unit components give 1.23 exactly


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise InvalidParameterError(f"image shapes differ: {np.shape(a)} vs {np.shape(b)}")


def srgb_encode(x):
    """Linear to sRGB; the power branch extends smoothly above 1 instead of clamping."""
    x = np.asarray(x, dtype=np.float64)
    lo = x <= 0.0031308
    return np.where(lo, 12.92 * x, 1.055 * np.power(np.where(lo, 1.0, x), 1 / 2.4) - 0.055)


def srgb_encode_grad(x):
    x = np.asarray(x, dtype=np.float64)
    lo = x <= 0.0031308
    return np.where(lo, 12.92, (1.055 / 2.4) * np.power(np.where(lo, 1.0, x), 1 / 2.4 - 1))


def srgb_decode(y):
    y = np.asarray(y, dtype=np.float64)
    lo = y <= 0.04045
    return np.where(lo, y / 12.92, np.power((np.where(lo, 0.0, y) + 0.055) / 1.055, 2.4))


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _window_for(h: int, w: int) -> np.ndarray:
    size = min(SSIM_WINDOW, h, w)
    if size % 2 == 0:
        size -= 1
    return gaussian_kernel(max(size, 1))


def _filter_valid(img, k):
    """Separable valid-mode correlation over the two leading axes of (H, W, C)."""
    t = np.einsum("hwck,k->hwc", sliding_window_view(img, k.size, axis=0), k)
    return np.einsum("hwck,k->hwc", sliding_window_view(t, k.size, axis=1), k)


def _filter_adjoint(g, k):
    p = k.size - 1
    padded = np.pad(g, ((p, p), (p, p), (0, 0)))
    return _filter_valid(padded, k[::-1])


def ssim_map(x, y, grad: bool = False):
    """SSIM map of two (H, W, C) images; with ``grad`` also returns d mean(SSIM)/dx."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    k = _window_for(x.shape[0], x.shape[1])
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    ex2, ey2, exy = _filter_valid(x * x, k), _filter_valid(y * y, k), _filter_valid(x * y, k)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (exy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (ex2 - mx * mx) + (ey2 - my * my) + SSIM_C2
    s = a1 * a2 / (b1 * b2)
    if not grad:
        return s
    inv_n = 1.0 / s.size
    g_mx = inv_n * s * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2)
    g_exy = inv_n * s * 2 / a2
    g_ex2 = -inv_n * s / b2
    gx = _filter_adjoint(g_mx, k) + 2 * x * _filter_adjoint(g_ex2, k) + y * _filter_adjoint(g_exy, k)
    return s, gx


def loss_photometric(rendered, gt, grad: bool = False, srgb: bool = True):
    """(L1, 1 - mean SSIM) between a render and its target, optionally in sRGB space.

    With ``grad`` returns (l1, ssim_loss, d l1/d rendered, d ssim_loss/d rendered).
    """
    _check_shapes(rendered, gt)
    r = np.asarray(rendered, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if srgb:
        rs, gs = srgb_encode(r), srgb_encode(g)
    else:
        rs, gs = r, g
    diff = rs - gs
    l1 = float(np.abs(diff).mean())
    if not grad:
        return l1, float(1.0 - ssim_map(rs, gs).mean())
    s, gs_x = ssim_map(rs, gs, grad=True)
    gs_x = gs_x.reshape(r.shape)
    g_l1 = np.sign(diff) / diff.size
    g_ssim = -gs_x
    if srgb:
        d = srgb_encode_grad(r)
        g_l1 = g_l1 * d
        g_ssim = g_ssim * d
    return l1, float(1.0 - s.mean()), g_l1, g_ssim


def luminance(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def loss_tv(attr_map, reference_image, grad: bool = False):
    """Edge-aware smoothness: sum of exp(-|dI|) * (da)^2 along both axes, divided by the map size."""
    a = np.asarray(attr_map, dtype=np.float64)
    lum = luminance(reference_image)
    if a.shape[:2] != lum.shape:
        raise InvalidParameterError(f"attribute map {a.shape} and reference {lum.shape} differ in size")
    a3 = a if a.ndim == 3 else a[..., None]
    wy = np.exp(-np.abs(lum[1:] - lum[:-1]))[..., None]
    wx = np.exp(-np.abs(lum[:, 1:] - lum[:, :-1]))[..., None]
    dy = a3[1:] - a3[:-1]
    dx = a3[:, 1:] - a3[:, :-1]
    n = a3.size
    val = float(((wy * dy * dy).sum() + (wx * dx * dx).sum()) / n)
    if not grad:
        return val
    g = np.zeros_like(a3)
    gy = 2 * wy * dy / n
    gx = 2 * wx * dx / n
    g[1:] += gy
    g[:-1] -= gy
    g[:, 1:] += gx
    g[:, :-1] -= gx
    return val, g.reshape(a.shape)


def pseudo_normals(depth, camera: Camera):
    """Camera-space normals from central differences of back-projected depth, facing the camera.

    Returns (normals (H, W, 3), valid (H, W), aux) where aux carries what the backward pass needs.
    """
    z = np.asarray(depth, dtype=np.float64)
    rays = camera.pixel_rays()
    p = z[..., None] * rays
    h, w = z.shape
    a = np.zeros((h, w, 3))
    b = np.zeros((h, w, 3))
    a[:, 1:-1] = p[:, 2:] - p[:, :-2]
    b[1:-1] = p[2:] - p[:-2]
    c = np.cross(a, b)
    norm = np.linalg.norm(c, axis=-1)
    valid = norm > 1e-12
    valid[0, :] = valid[-1, :] = False
    valid[:, 0] = valid[:, -1] = False
    flip = np.where(np.einsum("hwc,hwc->hw", c, p) > 0, -1.0, 1.0)
    n = c * (flip / np.where(valid, norm, 1.0))[..., None]
    n[~valid] = 0.0
    return n, valid, (rays, a, b, norm, flip)


def loss_normal_consistency(normal_map, depth_map, alpha_map, camera: Camera, grad: bool = False,
                            threshold: float = 0.5):
    """mean(1 - n . n_D) over foreground pixels.

    The rendered normal map (world space, premultiplied) is normalized and
    rotated into the camera frame; the depth map is divided by alpha before
    back-projection. Foreground = alpha above ``threshold`` at the pixel and its
    four neighbours. With ``grad`` returns (loss, d/d normal_map, d/d depth_map, d/d alpha_map).
    """
    nm = np.asarray(normal_map, dtype=np.float64)
    alpha = np.asarray(alpha_map, dtype=np.float64)
    fg = alpha > threshold
    safe_a = np.where(fg, alpha, 1.0)
    z = np.where(fg, depth_map / safe_a, 0.0)
    nd, valid, (rays, a, b, cnorm, flip) = pseudo_normals(z, camera)
    mask = valid & fg
    mask[1:-1, 1:-1] &= fg[2:, 1:-1] & fg[:-2, 1:-1] & fg[1:-1, 2:] & fg[1:-1, :-2]
    nc = nm @ camera.rotation.T
    nlen = np.linalg.norm(nc, axis=-1)
    mask &= nlen > 1e-12
    count = int(mask.sum())
    if count == 0:
        return (0.0, np.zeros_like(nm), np.zeros_like(z), np.zeros_like(alpha)) if grad else 0.0
    nhat = nc / np.where(mask, nlen, 1.0)[..., None]
    cos = np.einsum("hwc,hwc->hw", nhat, nd)
    val = float((1.0 - cos)[mask].sum() / count)
    if not grad:
        return val
    m = mask[..., None] / count
    g_nhat = -nd * m
    g_nd = -nhat * m
    # through normalization of the rendered normal, then back to world space
    g_nc = (g_nhat - nhat * np.einsum("hwc,hwc->hw", g_nhat, nhat)[..., None]) / np.where(mask, nlen, 1.0)[..., None]
    g_nm = g_nc @ camera.rotation
    # through n_D = flip * c / |c|
    g_c = flip[..., None] * (g_nd - nd * np.einsum("hwc,hwc->hw", g_nd, nd)[..., None]) \
        / np.where(mask, cnorm, 1.0)[..., None]
    g_a = np.cross(b, g_c)
    g_b = np.cross(g_c, a)
    g_p = np.zeros_like(a)
    g_p[:, 2:] += g_a[:, 1:-1]
    g_p[:, :-2] -= g_a[:, 1:-1]
    g_p[2:] += g_b[1:-1]
    g_p[:-2] -= g_b[1:-1]
    g_z = np.einsum("hwc,hwc->hw", g_p, rays) * fg
    g_depth = g_z / safe_a
    g_alpha = -g_z * z / safe_a
    return val, g_nm, g_depth, g_alpha


def loss_normal_reg(normal_offsets, grad: bool = False):
    """Mean squared norm of all normal offset vectors."""
    d = np.asarray(normal_offsets, dtype=np.float64)
    n = max(d.size // 3, 1)
    val = float((d * d).sum() / n)
    return (val, 2.0 * d / n) if grad else val


def mirror_direction(normal, w):
    return 2.0 * np.sum(normal * w, axis=-1, keepdims=True) * normal - w


def sample_specular_direction(normal, buf: MicroBuffer, w_i) -> int:
    """Occluded sample closest to the mirror of ``w_i`` about ``normal``; NONE if nothing is occluded."""
    occ = np.asarray(buf.vis) == 0
    if not occ.any():
        return NONE
    mirror = mirror_direction(np.asarray(normal, dtype=np.float64), np.asarray(w_i, dtype=np.float64))
    score = np.where(occ, buf.directions @ mirror, -np.inf)
    return int(np.argmax(score))


def specular_selection(normals, mb: MicroBuffers, w_i) -> np.ndarray:
    """Vectorized ``sample_specular_direction`` for every Gaussian (G,), NONE where none qualifies."""
    mirror = mirror_direction(normals, w_i)
    score = np.einsum("gkc,gc->gk", mb.directions, mirror)
    occ = (mb.vis == 0) & (mb.first_hit != NONE)
    score = np.where(occ, score, -np.inf)
    idx = np.argmax(score, axis=1)
    return np.where(occ.any(axis=1), idx, NONE)


def loss_radiance_consistency(gaussians: Gaussians, vertex_sets: VertexSets, mb: MicroBuffers,
                              env: EnvironmentMap, w_i, f0: float = F0_DEFAULT, grad: bool = False,
                              selection: np.ndarray | None = None):
    """Mean |L_ind - one-bounce estimate| over Gaussians with an occluded near-mirror sample.

    ``w_i`` (G, 3) are unit directions from each Gaussian toward the active camera.
    The baked L_ind is a fixed target; gradients flow into the secondary Gaussians'
    vertex attributes and are returned as a dict with albedo, roughness, normal_offset.
    """
    if selection is None:
        selection = specular_selection(gaussians.normals(), mb, w_i)
    rows = np.nonzero(selection != NONE)[0]
    m = vertex_sets.count
    if rows.size == 0:
        if not grad:
            return 0.0
        return 0.0, {"albedo": np.zeros_like(vertex_sets.albedo), "roughness": np.zeros_like(vertex_sets.roughness),
                     "normal_offset": np.zeros_like(vertex_sets.normal_offset)}
    ks = selection[rows]
    hit = mb.first_hit[rows, ks]
    uv = mb.first_uv[rows, ks]
    target = mb.l_ind[rows, ks]
    w_out = -mb.directions[rows, ks]
    wts = vertex_weights(uv[:, 0], uv[:, 1], m)  # (R, M)
    alb_raw = interpolate(vertex_sets.albedo[hit], wts)
    rgh_raw = interpolate(vertex_sets.roughness[hit], wts)
    off = interpolate(vertex_sets.normal_offset[hit], wts)
    alb = np.clip(alb_raw, 0.0, 1.0)
    rgh = np.clip(rgh_raw, R_MIN, 1.0)
    rots = gaussians.rotations()[hit]
    normals, raw = normals_from_offsets(rots, off)
    l_dir = env.lookup(mb.directions[hit]) * mb.vis[hit][..., None]
    res = shade(mb.directions[hit], l_dir, alb[:, None], rgh[:, None], normals[:, None], w_out, f0, grads=grad)
    est = (res[0] if grad else res)[:, 0]
    diff = est - target
    val = float(np.abs(diff).mean())
    if not grad:
        return val
    g_est = np.sign(diff) / diff.size
    g_a, g_r, g_n = res[1](g_est[:, None])
    g_a = g_a[:, 0] * ((alb_raw >= 0) & (alb_raw <= 1))
    g_r = g_r[:, 0] * ((rgh_raw >= R_MIN) & (rgh_raw <= 1))
    g_off = offset_grad(rots, normals, raw, g_n[:, 0])
    n = len(gaussians)
    idx = (hit[:, None] * m + np.arange(m)[None, :]).ravel()

    def scatter(per_row):
        if per_row.ndim == 1:
            return np.bincount(idx, weights=(wts * per_row[:, None]).ravel(), minlength=n * m).reshape(n, m)
        out = np.empty((n * m, per_row.shape[1]))
        for c in range(per_row.shape[1]):
            out[:, c] = np.bincount(idx, weights=(wts * per_row[:, c:c + 1]).ravel(), minlength=n * m)
        return out.reshape(n, m, -1)

    return val, {"albedo": scatter(g_a), "roughness": scatter(g_r), "normal_offset": scatter(g_off)}
