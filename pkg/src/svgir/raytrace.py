"""Ray tracing through the Gaussian radiance field.

Each surfel is treated as a thin elliptical disk whose axes span three times
its scales. A median-split BVH over the disks accelerates nearest-hit queries;
``trace_ray`` marches through successive hits accumulating radiance and
transmittance, and ``bake_microbuffers`` stores K traced hemisphere samples per
Gaussian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .errors import InvalidParameterError
from .microbuffer import NONE, MicroBuffers
from .scene import Gaussians, Scene
from .shading import hemisphere_directions
from .splat import ALPHA_MAX
from .tangent import TANGENT_OFFSET

DISK_EXTENT = 3.0
DISK_THICKNESS = 1e-12
VIS_THRESHOLD = 0.8
HOP_OFFSET = 0.05
HOP_LIMIT = 64
T_FLOOR = 1e-3
T_MIN = 1e-9
LEAF_SIZE = 4
WINDOW_CAP = 64
COPLANAR_EPS = 1e-7


@dataclass
class GaussianDisk:
    center: np.ndarray
    axes: np.ndarray  # (2, 3): tangent directions scaled by 3 s_x and 3 s_y
    normal: np.ndarray
    thickness: float
    source: int


@dataclass
class DiskSet:
    """Kernel-ready arrays describing every surfel as a disk."""

    centers: np.ndarray
    tu: np.ndarray
    tv: np.ndarray
    normals: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    radiance: np.ndarray  # (N, 4, 3): constant term and direction-linear terms

    def __len__(self) -> int:
        return self.centers.shape[0]

    def __getitem__(self, i: int) -> GaussianDisk:
        axes = np.stack([self.tu[i] * DISK_EXTENT * self.scales[i, 0], self.tv[i] * DISK_EXTENT * self.scales[i, 1]])
        return GaussianDisk(self.centers[i], axes, self.normals[i], DISK_THICKNESS, i)

    def bounds(self):
        ext = np.sqrt((DISK_EXTENT * self.scales[:, :1] * self.tu) ** 2
                      + (DISK_EXTENT * self.scales[:, 1:] * self.tv) ** 2
                      + (0.5 * DISK_THICKNESS * self.normals) ** 2)
        pad = 1e-9 * (1.0 + np.abs(self.centers) + ext)
        return self.centers - ext - pad, self.centers + ext + pad


def gaussian_disks(gaussians: Gaussians) -> DiskSet:
    rot = gaussians.rotations()
    rad = np.zeros((len(gaussians), 4, 3))
    if gaussians.sh_degree == 0:
        rad[:, 0] = gaussians.radiance
    else:
        rad[:] = gaussians.radiance
    return DiskSet(
        np.ascontiguousarray(gaussians.positions), np.ascontiguousarray(rot[:, :, 0]),
        np.ascontiguousarray(rot[:, :, 1]), np.ascontiguousarray(rot[:, :, 2]),
        np.ascontiguousarray(gaussians.scales), np.ascontiguousarray(gaussians.opacities), rad,
    )


@dataclass
class BVH:
    """Flattened binary tree. Leaves cover ``order[start:start + count]``; inner nodes have count 0."""

    bmin: np.ndarray
    bmax: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    disks: DiskSet

    @property
    def n_nodes(self) -> int:
        return self.bmin.shape[0]


def build_bvh(scene_or_gaussians, leaf_size: int = LEAF_SIZE) -> BVH:
    """Median split on the longest axis of the centroid bounds."""
    gaussians = scene_or_gaussians.gaussians if isinstance(scene_or_gaussians, Scene) else scene_or_gaussians
    if len(gaussians) == 0:
        raise InvalidParameterError("cannot build a BVH over an empty scene")
    disks = gaussian_disks(gaussians)
    lo, hi = disks.bounds()
    cent = disks.centers
    order = np.arange(len(disks))
    bmin, bmax, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        idx = order[s:e]
        bmin.append(lo[idx].min(axis=0))
        bmax.append(hi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return len(bmin) - 1

    stack = [(new_node(0, len(order)), 0, len(order))]
    while stack:
        node, s, e = stack.pop()
        if e - s <= leaf_size:
            continue
        c = cent[order[s:e]]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        sub = order[s:e]
        order[s:e] = sub[np.lexsort((sub, c[:, axis]))]
        mid = (s + e) // 2
        ln = new_node(s, mid)
        rn = new_node(mid, e)
        left[node], right[node], count[node] = ln, rn, 0
        stack.append((rn, mid, e))
        stack.append((ln, s, mid))
    return BVH(np.array(bmin), np.array(bmax), np.array(left, np.int64), np.array(right, np.int64),
               np.array(start, np.int64), np.array(count, np.int64), order.astype(np.int64), disks)


@njit(cache=True)
def _intersect(g, ox, oy, oz, dx, dy, dz, centers, tu, tv, normals, scales):
    """(hit, t, x, y) for the ray against disk g; x, y are world-unit tangent offsets."""
    nx, ny, nz = normals[g, 0], normals[g, 1], normals[g, 2]
    nd = nx * dx + ny * dy + nz * dz
    if abs(nd) < 1e-12:
        return False, 0.0, 0.0, 0.0
    t = (nx * (centers[g, 0] - ox) + ny * (centers[g, 1] - oy) + nz * (centers[g, 2] - oz)) / nd
    if not t > T_MIN:
        return False, 0.0, 0.0, 0.0
    px = ox + t * dx - centers[g, 0]
    py = oy + t * dy - centers[g, 1]
    pz = oz + t * dz - centers[g, 2]
    x = px * tu[g, 0] + py * tu[g, 1] + pz * tu[g, 2]
    y = px * tv[g, 0] + py * tv[g, 1] + pz * tv[g, 2]
    ex = x / (DISK_EXTENT * scales[g, 0])
    ey = y / (DISK_EXTENT * scales[g, 1])
    if ex * ex + ey * ey > 1.0:
        return False, 0.0, 0.0, 0.0
    return True, t, x, y


@njit(cache=True)
def _disk_alpha(g, x, y, scales, opac):
    qx = x / scales[g, 0]
    qy = y / scales[g, 1]
    return min(opac[g] * math.exp(-0.5 * (qx * qx + qy * qy)), ALPHA_MAX)


@njit(cache=True)
def _box_hit(bmin, bmax, node, ox, oy, oz, dx, dy, dz, tmax):
    t0 = T_MIN
    t1 = tmax
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < bmin[node, a] or o[a] > bmax[node, a]:
                return False
            continue
        inv = 1.0 / d[a]
        ta = (bmin[node, a] - o[a]) * inv
        tb = (bmax[node, a] - o[a]) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@njit(cache=True)
def _nearest_bvh(bmin, bmax, left, right, start, count, order, centers, tu, tv, normals, scales,
                 ox, oy, oz, dx, dy, dz, exclude):
    best_t = np.inf
    best_g = -1
    best_x = 0.0
    best_y = 0.0
    stack = np.empty(128, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _box_hit(bmin, bmax, node, ox, oy, oz, dx, dy, dz, best_t):
            continue
        if count[node] > 0:
            for k in range(start[node], start[node] + count[node]):
                g = order[k]
                if g == exclude:
                    continue
                hit, t, x, y = _intersect(g, ox, oy, oz, dx, dy, dz, centers, tu, tv, normals, scales)
                if hit and (t < best_t or (t == best_t and g < best_g)):
                    best_t, best_g, best_x, best_y = t, g, x, y
        else:
            stack[sp] = right[node]
            sp += 1
            stack[sp] = left[node]
            sp += 1
    return best_g, best_t, best_x, best_y


@njit(cache=True)
def _nearest_brute(centers, tu, tv, normals, scales, ox, oy, oz, dx, dy, dz, exclude):
    best_t = np.inf
    best_g = -1
    best_x = 0.0
    best_y = 0.0
    for g in range(centers.shape[0]):
        if g == exclude:
            continue
        hit, t, x, y = _intersect(g, ox, oy, oz, dx, dy, dz, centers, tu, tv, normals, scales)
        if hit and (t < best_t or (t == best_t and g < best_g)):
            best_t, best_g, best_x, best_y = t, g, x, y
    return best_g, best_t, best_x, best_y


@njit(cache=True)
def _insert_hit(n, cap, g, t, x, y, hg, ht, hx, hy):
    """Insert into the (t, index)-sorted window buffers; returns the new count."""
    j = n if n < cap else cap - 1
    if n >= cap and (t > ht[j] or (t == ht[j] and g > hg[j])):
        return n
    while j > 0 and (ht[j - 1] > t or (ht[j - 1] == t and hg[j - 1] > g)):
        if j < cap:
            hg[j], ht[j], hx[j], hy[j] = hg[j - 1], ht[j - 1], hx[j - 1], hy[j - 1]
        j -= 1
    hg[j], ht[j], hx[j], hy[j] = g, t, x, y
    return n + 1 if n < cap else cap


@njit(cache=True)
def _window_hits(bmin, bmax, left, right, start, count, order, centers, tu, tv, normals, scales,
                 ox, oy, oz, dx, dy, dz, exclude, t_hi, use_bvh, hg, ht, hx, hy):
    """All disk hits with t <= t_hi, sorted by (t, index); returns how many were kept."""
    cap = hg.shape[0]
    n = 0
    if not use_bvh:
        for g in range(centers.shape[0]):
            if g == exclude:
                continue
            hit, t, x, y = _intersect(g, ox, oy, oz, dx, dy, dz, centers, tu, tv, normals, scales)
            if hit and t <= t_hi:
                n = _insert_hit(n, cap, g, t, x, y, hg, ht, hx, hy)
        return n
    stack = np.empty(128, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _box_hit(bmin, bmax, node, ox, oy, oz, dx, dy, dz, t_hi):
            continue
        if count[node] > 0:
            for k in range(start[node], start[node] + count[node]):
                g = order[k]
                if g == exclude:
                    continue
                hit, t, x, y = _intersect(g, ox, oy, oz, dx, dy, dz, centers, tu, tv, normals, scales)
                if hit and t <= t_hi:
                    n = _insert_hit(n, cap, g, t, x, y, hg, ht, hx, hy)
        else:
            stack[sp] = right[node]
            sp += 1
            stack[sp] = left[node]
            sp += 1
    return n


@njit(cache=True)
def _trace_one(bmin, bmax, left, right, start, count, order, centers, tu, tv, normals, scales, opac, rad,
               ox, oy, oz, dx, dy, dz, exclude, use_bvh, out_l):
    """March one ray; returns (T, first_hit, u, v) and writes accumulated radiance to out_l.

    Each hop composites every disk hit between the nearest hit and HOP_OFFSET past it,
    so overlapping coplanar surfels all attenuate the ray.
    """
    out_l[0] = 0.0
    out_l[1] = 0.0
    out_l[2] = 0.0
    trans = 1.0
    first = -1
    fu = np.nan
    fv = np.nan
    best_a = -1.0
    excl = exclude
    hg = np.empty(WINDOW_CAP, np.int64)
    ht = np.empty(WINDOW_CAP)
    hx = np.empty(WINDOW_CAP)
    hy = np.empty(WINDOW_CAP)
    for hop in range(HOP_LIMIT):
        if use_bvh:
            g, t, x, y = _nearest_bvh(bmin, bmax, left, right, start, count, order, centers, tu, tv,
                                      normals, scales, ox, oy, oz, dx, dy, dz, excl)
        else:
            g, t, x, y = _nearest_brute(centers, tu, tv, normals, scales, ox, oy, oz, dx, dy, dz, excl)
        if g < 0:
            break
        n = _window_hits(bmin, bmax, left, right, start, count, order, centers, tu, tv, normals, scales,
                         ox, oy, oz, dx, dy, dz, excl, t + HOP_OFFSET, use_bvh, hg, ht, hx, hy)
        for j in range(n):
            h = hg[j]
            a = _disk_alpha(h, hx[j], hy[j], scales, opac)
            for ch in range(3):
                c = rad[h, 0, ch] - dx * rad[h, 1, ch] - dy * rad[h, 2, ch] - dz * rad[h, 3, ch]
                if c < 0.0:
                    c = 0.0
                out_l[ch] += trans * a * c
            if hop == 0 and ht[j] <= ht[0] + COPLANAR_EPS * (1.0 + ht[0]):
                # coplanar ties at the first surface: keep the disk the ray passes closest to
                if first < 0 or a > best_a:
                    first = h
                    best_a = a
                    fu = hx[j] / (scales[h, 0] + TANGENT_OFFSET)
                    fv = hy[j] / (scales[h, 1] + TANGENT_OFFSET)
            trans *= 1.0 - a
            if trans < T_FLOOR:
                break
        if trans < T_FLOOR:
            break
        ox = ox + (t + HOP_OFFSET) * dx
        oy = oy + (t + HOP_OFFSET) * dy
        oz = oz + (t + HOP_OFFSET) * dz
        excl = -1
    return trans, first, fu, fv


@njit(cache=True, parallel=True)
def _trace_batch(bmin, bmax, left, right, start, count, order, centers, tu, tv, normals, scales, opac, rad,
                 origins, dirs, exclude, use_bvh, out_l, out_t, out_first, out_uv):
    for r in prange(origins.shape[0]):
        buf = np.empty(3)
        tr, first, fu, fv = _trace_one(bmin, bmax, left, right, start, count, order, centers, tu, tv, normals,
                                       scales, opac, rad, origins[r, 0], origins[r, 1], origins[r, 2],
                                       dirs[r, 0], dirs[r, 1], dirs[r, 2], exclude[r], use_bvh, buf)
        out_l[r, 0] = buf[0]
        out_l[r, 1] = buf[1]
        out_l[r, 2] = buf[2]
        out_t[r] = tr
        out_first[r] = first
        out_uv[r, 0] = fu
        out_uv[r, 1] = fv


@njit(cache=True, parallel=True)
def _nearest_batch(bmin, bmax, left, right, start, count, order, centers, tu, tv, normals, scales,
                   origins, dirs, use_bvh, out_g, out_t):
    for r in prange(origins.shape[0]):
        if use_bvh:
            g, t, x, y = _nearest_bvh(bmin, bmax, left, right, start, count, order, centers, tu, tv, normals,
                                      scales, origins[r, 0], origins[r, 1], origins[r, 2],
                                      dirs[r, 0], dirs[r, 1], dirs[r, 2], -1)
        else:
            g, t, x, y = _nearest_brute(centers, tu, tv, normals, scales, origins[r, 0], origins[r, 1],
                                        origins[r, 2], dirs[r, 0], dirs[r, 1], dirs[r, 2], -1)
        out_g[r] = g
        out_t[r] = t


def _bvh_args(bvh: BVH):
    d = bvh.disks
    return (bvh.bmin, bvh.bmax, bvh.left, bvh.right, bvh.start, bvh.count, bvh.order,
            d.centers, d.tu, d.tv, d.normals, d.scales)


def nearest_hits(bvh: BVH, origins, dirs, use_bvh: bool = True):
    """Nearest-hit Gaussian index (-1 on miss) and ray parameter for a batch of rays."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    g = np.empty(origins.shape[0], np.int64)
    t = np.empty(origins.shape[0])
    _nearest_batch(*_bvh_args(bvh), origins, dirs, use_bvh, g, t)
    return g, t


def intersect_disk(origin, direction, disks: DiskSet, index: int):
    """Hit of one ray with one disk: None on a miss, else (t, (u, v), alpha)."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    hit, t, x, y = _intersect(index, o[0], o[1], o[2], d[0], d[1], d[2],
                              disks.centers, disks.tu, disks.tv, disks.normals, disks.scales)
    if not hit:
        return None
    s = disks.scales[index]
    uv = (x / (s[0] + TANGENT_OFFSET), y / (s[1] + TANGENT_OFFSET))
    return t, uv, _disk_alpha(index, x, y, disks.scales, disks.opacities)


@dataclass
class TraceResult:
    l_ind: np.ndarray
    trans: np.ndarray
    first_hit: np.ndarray
    first_uv: np.ndarray


def trace_rays(bvh: BVH, origins, dirs, exclude=None, use_bvh: bool = True) -> TraceResult:
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    exclude = np.full(n, -1, np.int64) if exclude is None else np.ascontiguousarray(exclude, dtype=np.int64)
    out_l = np.empty((n, 3))
    out_t = np.empty(n)
    out_first = np.empty(n, np.int64)
    out_uv = np.empty((n, 2))
    d = bvh.disks
    _trace_batch(*_bvh_args(bvh), d.opacities, d.radiance, origins, dirs, exclude, use_bvh,
                 out_l, out_t, out_first, out_uv)
    return TraceResult(out_l, out_t, out_first, out_uv)


def trace_ray(bvh: BVH, origin, direction, exclude: int = -1):
    """(L_ind, T, first_hit or NONE, first_uv or None) for a single ray."""
    r = trace_rays(bvh, np.asarray(origin)[None], np.asarray(direction)[None], np.array([exclude]))
    first = int(r.first_hit[0])
    return r.l_ind[0], float(r.trans[0]), first, (None if first == NONE else tuple(r.first_uv[0]))


def visibility_from_T(trans):
    """1 where transmittance exceeds 0.8, else 0."""
    return (np.asarray(trans) > VIS_THRESHOLD).astype(np.uint8)


def bake_microbuffers(scene_or_gaussians, bvh: BVH | None = None, k: int = 64, seed: int = 0,
                      origin_offset: float = HOP_OFFSET) -> MicroBuffers:
    """Trace K hemisphere rays from every Gaussian center and record the results.

    The center counts as a hit on the Gaussian's own disk, so rays start
    ``origin_offset`` along their direction, like any continuation hop. On
    curved surfaces this keeps neighbouring, slightly tilted disks from
    occluding the center.
    """
    gaussians = scene_or_gaussians.gaussians if isinstance(scene_or_gaussians, Scene) else scene_or_gaussians
    if bvh is None:
        bvh = build_bvh(gaussians)
    g = len(gaussians)
    normals = gaussians.normals()
    dirs = hemisphere_directions(normals, k, seed)
    origins = np.repeat(gaussians.positions, k, axis=0) + origin_offset * dirs.reshape(-1, 3)
    exclude = np.repeat(np.arange(g, dtype=np.int64), k)
    res = trace_rays(bvh, origins, dirs.reshape(-1, 3), exclude)
    return MicroBuffers(
        dirs,
        res.l_ind.reshape(g, k, 3),
        res.trans.reshape(g, k),
        visibility_from_T(res.trans).reshape(g, k),
        res.first_hit.reshape(g, k),
        res.first_uv.reshape(g, k, 2),
    )
