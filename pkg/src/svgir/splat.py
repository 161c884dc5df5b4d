"""Screen-space splatting of Gaussian surfels with per-pixel vertex interpolation.

Forward: project every surfel with a first-order (affine) camera model, bin the
3-sigma footprints into tiles, walk each pixel's depth-ordered list and record
one fragment per contributing surfel. Buffers are alpha-blended from fragment
values; the fragment list is kept so the backward pass can run in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .errors import ResourceLimitError
from .scene import R_MIN, Camera, Gaussians, Scene, VertexSets
from .tangent import TANGENT_OFFSET, interpolate, normals_from_offsets, offset_grad, vertex_weights

LOWPASS = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999
T_STOP = 1e-4
COND_MAX = 1e8
NEAR = 0.01
TILE = 16
MAX_PIXELS = 1 << 26
MAX_FRAGMENTS = 1 << 28


@dataclass
class ProjectedGaussian:
    screen_mean: np.ndarray
    screen_cov: np.ndarray
    inv_jacobian: np.ndarray
    depth: float
    bbox: tuple  # (x0, x1, y0, y1), half-open pixel ranges
    opacity: float


@dataclass
class Projection:
    """Stacked projection results for every Gaussian of a scene (culled ones flagged)."""

    visible: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # (N, 3): a, b, c of the inverse screen covariance
    inv_jac: np.ndarray
    depth: np.ndarray
    bbox: np.ndarray  # (N, 4) int64
    mu_cam: np.ndarray
    normal_cam: np.ndarray


def project_gaussians(gaussians: Gaussians, camera: Camera, near: float = NEAR) -> Projection:
    n = len(gaussians)
    rot_cw = camera.rotation
    rg = gaussians.rotations()
    mu_c = gaussians.positions @ rot_cw.T + camera.translation
    tu = rg[:, :, 0] @ rot_cw.T
    tv = rg[:, :, 1] @ rot_cw.T
    nc = rg[:, :, 2] @ rot_cw.T
    x, y, z = mu_c[:, 0], mu_c[:, 1], mu_c[:, 2]
    front = z > near
    zs = np.where(front, z, 1.0)
    fx, fy = camera.fx, camera.fy
    # rows of the perspective jacobian at mu
    j0 = np.stack([fx / zs, np.zeros(n), -fx * x / zs**2], axis=1)
    j1 = np.stack([np.zeros(n), fy / zs, -fy * y / zs**2], axis=1)
    a = np.empty((n, 2, 2))
    a[:, 0, 0] = np.einsum("ni,ni->n", j0, tu)
    a[:, 0, 1] = np.einsum("ni,ni->n", j0, tv)
    a[:, 1, 0] = np.einsum("ni,ni->n", j1, tu)
    a[:, 1, 1] = np.einsum("ni,ni->n", j1, tv)
    det = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]
    fro2 = np.einsum("nij,nij->n", a, a)
    disc = np.sqrt(np.maximum(fro2**2 - 4 * det**2, 0.0))
    smax2 = 0.5 * (fro2 + disc)
    adet = np.abs(det)
    cond = np.where(adet > 0, smax2 / np.where(adet > 0, adet, 1.0), np.inf)
    ok = front & (cond <= COND_MAX) & np.isfinite(cond)
    sd = np.where(ok, det, 1.0)
    inv = np.empty_like(a)
    inv[:, 0, 0] = a[:, 1, 1] / sd
    inv[:, 0, 1] = -a[:, 0, 1] / sd
    inv[:, 1, 0] = -a[:, 1, 0] / sd
    inv[:, 1, 1] = a[:, 0, 0] / sd
    s2 = gaussians.scales**2
    cov = np.einsum("nij,nj,nkj->nik", a, s2, a)
    cov[:, 0, 0] += LOWPASS
    cov[:, 1, 1] += LOWPASS
    cdet = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic = np.stack([cov[:, 1, 1] / cdet, -cov[:, 0, 1] / cdet, cov[:, 0, 0] / cdet], axis=1)
    mean = np.stack([fx * x / zs + camera.cx, fy * y / zs + camera.cy], axis=1)
    mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid**2 - cdet, 0.0))
    radius = 3.0 * np.sqrt(lam)
    with np.errstate(invalid="ignore"):
        bbox = np.stack([
            np.floor(mean[:, 0] - radius), np.ceil(mean[:, 0] + radius),
            np.floor(mean[:, 1] - radius), np.ceil(mean[:, 1] + radius),
        ], axis=1)
    bbox = np.nan_to_num(bbox, nan=0.0, posinf=0.0, neginf=0.0)
    bbox[:, 0:2] = np.clip(bbox[:, 0:2], 0, camera.width)
    bbox[:, 2:4] = np.clip(bbox[:, 2:4], 0, camera.height)
    bbox = bbox.astype(np.int64)
    ok &= (bbox[:, 1] > bbox[:, 0]) & (bbox[:, 3] > bbox[:, 2])
    return Projection(ok, mean, cov, conic, inv, np.where(front, z, -np.inf), bbox, mu_c, nc)


def project_gaussian(gaussian, camera: Camera):
    """Project a single surfel; returns None when it is culled."""
    g = Gaussians(gaussian.position[None], gaussian.rotation[None], gaussian.scale[None],
                  [gaussian.opacity], np.zeros((1, 3)))
    p = project_gaussians(g, camera)
    if not p.visible[0]:
        return None
    return ProjectedGaussian(p.mean2d[0], p.cov2d[0], p.inv_jac[0], float(p.depth[0]),
                             tuple(int(b) for b in p.bbox[0]), float(gaussian.opacity))


def fragment_weight(projected: ProjectedGaussian, pixel_center) -> float:
    """Alpha of one surfel at a pixel, clamped to [0, 0.999]; zero below 1/255."""
    d = np.asarray(pixel_center, dtype=np.float64) - projected.screen_mean
    q = d @ np.linalg.solve(projected.screen_cov, d)
    alpha = min(projected.opacity * math.exp(-0.5 * q), ALPHA_MAX)
    return alpha if alpha >= ALPHA_MIN else 0.0


def alpha_blend(fragments, background=0.0):
    """Front-to-back compositing of (value, alpha) pairs.

    Returns (sum T_i alpha_i v_i + T_final * background, 1 - T_final).
    """
    acc = None
    t = 1.0
    for value, alpha in fragments:
        if t < T_STOP:
            break
        alpha = min(alpha, ALPHA_MAX)
        contrib = t * alpha * np.asarray(value, dtype=np.float64)
        acc = contrib if acc is None else acc + contrib
        t *= 1.0 - alpha
    if acc is None:
        return np.asarray(background, dtype=np.float64) * 1.0, 0.0
    return acc + t * np.asarray(background, dtype=np.float64), 1.0 - t


@njit(cache=True)
def _bin_tiles(order, bbox, n_tx, n_ty):
    counts = np.zeros(n_tx * n_ty + 1, np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        for ty in range(bbox[g, 2] // TILE, (bbox[g, 3] - 1) // TILE + 1):
            for tx in range(bbox[g, 0] // TILE, (bbox[g, 1] - 1) // TILE + 1):
                counts[ty * n_tx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        for ty in range(bbox[g, 2] // TILE, (bbox[g, 3] - 1) // TILE + 1):
            for tx in range(bbox[g, 0] // TILE, (bbox[g, 1] - 1) // TILE + 1):
                t = ty * n_tx + tx
                items[fill[t]] = g
                fill[t] += 1
    return offsets, items


@njit(cache=True, inline="always")
def _alpha_at(g, px, py, mean, conic, opac):
    dx = px - mean[g, 0]
    dy = py - mean[g, 1]
    power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy)
    gval = math.exp(power) if power <= 0.0 else 1.0
    return opac[g] * gval, gval


@njit(cache=True, parallel=True)
def _count_fragments(width, height, n_tx, tile_off, tile_items, bbox, mean, conic, opac):
    counts = np.zeros(width * height, np.int64)
    for p in prange(width * height):
        y = p // width
        x = p - y * width
        px = x + 0.5
        py = y + 0.5
        t = (y // TILE) * n_tx + x // TILE
        trans = 1.0
        c = 0
        for k in range(tile_off[t], tile_off[t + 1]):
            if trans < T_STOP:
                break
            g = tile_items[k]
            if x < bbox[g, 0] or x >= bbox[g, 1] or y < bbox[g, 2] or y >= bbox[g, 3]:
                continue
            a, gv = _alpha_at(g, px, py, mean, conic, opac)
            if a < ALPHA_MIN:
                continue
            if a > ALPHA_MAX:
                a = ALPHA_MAX
            c += 1
            trans *= 1.0 - a
        counts[p] = c
    return counts


@njit(cache=True, parallel=True)
def _fill_fragments(width, height, n_tx, tile_off, tile_items, bbox, mean, conic, opac,
                    inv_jac, scales, mu_c, n_c, fx, fy, cx, cy, offsets,
                    f_pix, f_gid, f_alpha, f_trans, f_gval, f_clamp, f_u, f_v, f_depth, final_t):
    for p in prange(width * height):
        y = p // width
        x = p - y * width
        px = x + 0.5
        py = y + 0.5
        rx = (px - cx) / fx
        ry = (py - cy) / fy
        t = (y // TILE) * n_tx + x // TILE
        trans = 1.0
        o = offsets[p]
        for k in range(tile_off[t], tile_off[t + 1]):
            if trans < T_STOP:
                break
            g = tile_items[k]
            if x < bbox[g, 0] or x >= bbox[g, 1] or y < bbox[g, 2] or y >= bbox[g, 3]:
                continue
            a, gv = _alpha_at(g, px, py, mean, conic, opac)
            if a < ALPHA_MIN:
                continue
            clamped = a > ALPHA_MAX
            if clamped:
                a = ALPHA_MAX
            dx = px - mean[g, 0]
            dy = py - mean[g, 1]
            du = inv_jac[g, 0, 0] * dx + inv_jac[g, 0, 1] * dy
            dv = inv_jac[g, 1, 0] * dx + inv_jac[g, 1, 1] * dy
            nr = n_c[g, 0] * rx + n_c[g, 1] * ry + n_c[g, 2]
            if abs(nr) > 1e-12:
                z = (n_c[g, 0] * mu_c[g, 0] + n_c[g, 1] * mu_c[g, 1] + n_c[g, 2] * mu_c[g, 2]) / nr
            else:
                z = mu_c[g, 2]
            f_pix[o] = p
            f_gid[o] = g
            f_alpha[o] = a
            f_trans[o] = trans
            f_gval[o] = gv
            f_clamp[o] = clamped
            f_u[o] = du / (scales[g, 0] + TANGENT_OFFSET)
            f_v[o] = dv / (scales[g, 1] + TANGENT_OFFSET)
            f_depth[o] = z
            o += 1
            trans *= 1.0 - a
        final_t[p] = trans


@dataclass
class Fragments:
    """Per-pixel, depth-ordered fragment lists in CSR layout (pixel index = y * W + x)."""

    width: int
    height: int
    offsets: np.ndarray
    pixel: np.ndarray
    gid: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray  # transmittance in front of the fragment
    gval: np.ndarray  # unclamped Gaussian falloff, alpha = min(o * gval, 0.999)
    clamped: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    final_trans: np.ndarray

    @property
    def weight(self) -> np.ndarray:
        return self.trans * self.alpha

    def signature(self) -> tuple:
        """Discrete structure of the fragment set; changes when a cutoff or clamp is crossed."""
        return (self.pixel.shape[0], int(self.clamped.sum()), hash(self.gid.tobytes()))


def depth_order(proj: Projection) -> np.ndarray:
    idx = np.nonzero(proj.visible)[0]
    return idx[np.lexsort((idx, proj.depth[idx]))]


def generate_fragments(gaussians: Gaussians, camera: Camera, proj: Projection | None = None) -> Fragments:
    w, h = camera.width, camera.height
    if w * h > MAX_PIXELS or w <= 0 or h <= 0:
        raise ResourceLimitError(f"image size {w}x{h} exceeds the supported range")
    if proj is None:
        proj = project_gaussians(gaussians, camera)
    order = depth_order(proj)
    n_tx = (w + TILE - 1) // TILE
    n_ty = (h + TILE - 1) // TILE
    tile_off, tile_items = _bin_tiles(order, proj.bbox, n_tx, n_ty)
    opac = np.ascontiguousarray(gaussians.opacities)
    counts = _count_fragments(w, h, n_tx, tile_off, tile_items, proj.bbox, proj.mean2d, proj.conic, opac)
    offsets = np.zeros(w * h + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    nf = int(offsets[-1])
    if nf > MAX_FRAGMENTS:
        raise ResourceLimitError(f"{nf} fragments exceed the supported maximum")
    f_pix = np.empty(nf, np.int64)
    f_gid = np.empty(nf, np.int64)
    f_alpha = np.empty(nf)
    f_trans = np.empty(nf)
    f_gval = np.empty(nf)
    f_clamp = np.empty(nf, np.bool_)
    f_u = np.empty(nf)
    f_v = np.empty(nf)
    f_depth = np.empty(nf)
    final_t = np.empty(w * h)
    _fill_fragments(w, h, n_tx, tile_off, tile_items, proj.bbox, proj.mean2d, proj.conic, opac,
                    proj.inv_jac, np.ascontiguousarray(gaussians.scales), proj.mu_cam, proj.normal_cam,
                    camera.fx, camera.fy, camera.cx, camera.cy, offsets,
                    f_pix, f_gid, f_alpha, f_trans, f_gval, f_clamp, f_u, f_v, f_depth, final_t)
    return Fragments(w, h, offsets, f_pix, f_gid, f_alpha, f_trans, f_gval, f_clamp, f_u, f_v, f_depth, final_t)


def blend(frags: Fragments, values: np.ndarray) -> np.ndarray:
    """Alpha-blend per-fragment values (F,) or (F, C) into an (H, W[, C]) map."""
    w = frags.weight
    npix = frags.width * frags.height
    if values.ndim == 1:
        return np.bincount(frags.pixel, weights=w * values, minlength=npix).reshape(frags.height, frags.width)
    out = np.empty((npix, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(frags.pixel, weights=w * values[:, c], minlength=npix)
    return out.reshape(frags.height, frags.width, values.shape[1])


@dataclass
class RenderBuffers:
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray


@dataclass
class RasterContext:
    """Forward state kept for the backward pass."""

    frags: Fragments
    weights: np.ndarray  # (F, M) vertex interpolation weights
    rotations: np.ndarray  # (F, 3, 3)
    values: dict
    albedo_mask: np.ndarray
    rough_mask: np.ndarray
    normal_raw: np.ndarray  # |N^g + R dN| per fragment (0 on fallback)
    n_gauss: int
    m: int


def rasterize_full(gaussians: Gaussians, vertex_sets: VertexSets, camera: Camera,
                   vertex_colors: np.ndarray, frags: Fragments | None = None):
    """Render all buffers; returns (RenderBuffers, RasterContext)."""
    if frags is None:
        frags = generate_fragments(gaussians, camera)
    m = vertex_sets.count
    gid = frags.gid
    wts = vertex_weights(frags.u, frags.v, m)
    colors = interpolate(vertex_colors[gid], wts)
    alb_raw = interpolate(vertex_sets.albedo[gid], wts)
    rgh_raw = interpolate(vertex_sets.roughness[gid], wts)
    alb = np.clip(alb_raw, 0.0, 1.0)
    rgh = np.clip(rgh_raw, R_MIN, 1.0)
    rots = gaussians.rotations()[gid]
    normals, nraw = normals_from_offsets(rots, interpolate(vertex_sets.normal_offset[gid], wts))
    values = {"color": colors, "albedo": alb, "roughness": rgh, "normal": normals, "depth": frags.depth}
    bufs = RenderBuffers(
        color=blend(frags, colors),
        alpha=1.0 - frags.final_trans.reshape(frags.height, frags.width),
        depth=blend(frags, frags.depth),
        normal=blend(frags, normals),
        albedo=blend(frags, alb),
        roughness=blend(frags, rgh),
    )
    ctx = RasterContext(frags, wts, rots, values, (alb_raw >= 0) & (alb_raw <= 1),
                        (rgh_raw >= R_MIN) & (rgh_raw <= 1), nraw, len(gaussians), m)
    return bufs, ctx


def rasterize(scene: Scene, camera: Camera, vertex_colors: np.ndarray) -> RenderBuffers:
    """Render color and attribute buffers from per-Gaussian vertex colors (N, M, 3)."""
    bufs, _ = rasterize_full(scene.gaussians, scene.vertex_sets, camera, vertex_colors)
    return bufs


@njit(cache=True)
def _alpha_grads(offsets, alpha, trans, q, final_t, g_acc):
    ga = np.empty(alpha.shape[0])
    for p in range(offsets.shape[0] - 1):
        suffix = 0.0
        tail = g_acc[p] * final_t[p]
        for f in range(offsets[p + 1] - 1, offsets[p] - 1, -1):
            inv = 1.0 / (1.0 - alpha[f])
            ga[f] = trans[f] * q[f] - suffix * inv + tail * inv
            suffix += trans[f] * alpha[f] * q[f]
    return ga


def _scatter_vertices(gid, wts, per_frag, n, m):
    """Accumulate per-fragment gradients onto vertices: out[g, m] += w[f, m] * per_frag[f]."""
    idx = (gid[:, None] * m + np.arange(m)[None, :]).ravel()
    if per_frag.ndim == 1:
        return np.bincount(idx, weights=(wts * per_frag[:, None]).ravel(), minlength=n * m).reshape(n, m)
    c = per_frag.shape[1]
    out = np.empty((n * m, c))
    for k in range(c):
        out[:, k] = np.bincount(idx, weights=(wts * per_frag[:, k:k + 1]).ravel(), minlength=n * m)
    return out.reshape(n, m, c)


def rasterize_backward(ctx: RasterContext, grads: dict) -> dict:
    """Gradients of a scalar loss given d loss / d buffer maps.

    ``grads`` may hold any of color, albedo, roughness, normal (H, W, C), depth,
    alpha (H, W). Returns gradients for vertex_colors, albedo, roughness,
    normal_offset (per vertex) and opacity (per Gaussian).
    """
    fr = ctx.frags
    npix = fr.width * fr.height
    pix = fr.pixel
    w = fr.weight
    q = np.zeros(pix.shape[0])
    per_frag = {}
    for name, g in grads.items():
        if name == "alpha" or g is None:
            continue
        gp = g.reshape(npix, -1)[pix]
        val = ctx.values[name]
        if val.ndim == 1:
            q += gp[:, 0] * val
            per_frag[name] = gp[:, 0] * w
        else:
            q += np.einsum("fc,fc->f", gp, val)
            per_frag[name] = gp * w[:, None]
    g_acc = grads.get("alpha")
    g_acc = np.zeros(npix) if g_acc is None else g_acc.reshape(npix)
    ga = _alpha_grads(fr.offsets, fr.alpha, fr.trans, q, fr.final_trans, g_acc)
    n, m = ctx.n_gauss, ctx.m
    out = {"opacity": np.bincount(fr.gid, weights=np.where(fr.clamped, 0.0, ga * fr.gval), minlength=n)}
    if "color" in per_frag:
        out["vertex_colors"] = _scatter_vertices(fr.gid, ctx.weights, per_frag["color"], n, m)
    if "albedo" in per_frag:
        out["albedo"] = _scatter_vertices(fr.gid, ctx.weights, per_frag["albedo"] * ctx.albedo_mask, n, m)
    if "roughness" in per_frag:
        out["roughness"] = _scatter_vertices(fr.gid, ctx.weights, per_frag["roughness"] * ctx.rough_mask, n, m)
    if "normal" in per_frag:
        gd = offset_grad(ctx.rotations, ctx.values["normal"], ctx.normal_raw, per_frag["normal"])
        out["normal_offset"] = _scatter_vertices(fr.gid, ctx.weights, gd, n, m)
    return out
