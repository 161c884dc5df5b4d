"""Tangent-space coordinates on a surfel and interpolation of Gaussian-vertex attributes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, NumericError
from .scene import R_MIN, SUPPORTED_VERTEX_COUNTS, GaussianSurfel, GaussianVertexSet, quat_to_rotmat

TANGENT_OFFSET = 0.1  # delta in (u, v) = d / (s + delta)
NORMAL_EPS = 1e-8


@dataclass
class TangentCoords:
    u: float
    v: float


@dataclass
class InterpolatedMaterial:
    albedo: np.ndarray
    roughness: float
    normal_offset: np.ndarray


def tangent_coords(pixel_center, screen_mean, scale, inv_jacobian) -> TangentCoords:
    """Map a pixel to normalized tangent coordinates of one surfel.

    ``inv_jacobian`` is the 2x2 screen-to-tangent map of the projected surfel;
    ``scale`` is (s_x, s_y) in world units.
    """
    jac = np.asarray(inv_jacobian, dtype=np.float64)
    if not np.all(np.isfinite(jac)):
        raise NumericError("non-finite screen-to-tangent jacobian")
    d = jac @ (np.asarray(pixel_center, dtype=np.float64) - np.asarray(screen_mean, dtype=np.float64))
    uv = d / (np.asarray(scale, dtype=np.float64) + TANGENT_OFFSET)
    return TangentCoords(float(uv[0]), float(uv[1]))


def vertex_weights(u, v, m: int) -> np.ndarray:
    """Interpolation weights (..., M) for the vertex layout of size ``m``.

    (u, v) are clamped to [-1, 1] first. M=4 is bilinear over the corners,
    M=2 is linear in u, M=6 is a 2x3 grid: linear in v, quadratic Lagrange in u.
    """
    if m not in SUPPORTED_VERTEX_COUNTS:
        raise InvalidParameterError(f"unsupported vertex count M={m}")
    u = np.clip(np.asarray(u, dtype=np.float64), -1.0, 1.0)
    v = np.clip(np.asarray(v, dtype=np.float64), -1.0, 1.0)
    shape = np.broadcast(u, v).shape
    if m == 1:
        return np.ones(shape + (1,))
    if m == 2:
        return np.stack(np.broadcast_arrays(0.5 * (1 - u), 0.5 * (1 + u)), axis=-1)
    if m == 4:
        return np.stack([
            0.25 * (1 - u) * (1 - v),
            0.25 * (1 + u) * (1 - v),
            0.25 * (1 - u) * (1 + v),
            0.25 * (1 + u) * (1 + v),
        ], axis=-1)
    lu = [0.5 * u * (u - 1), 1 - u * u, 0.5 * u * (u + 1)]
    lv = [0.5 * (1 - v), 0.5 * (1 + v)]
    return np.stack([lu[i] * lv[j] for j in range(2) for i in range(3)], axis=-1)


def interpolate(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum over the vertex axis: values (..., M, C) or (..., M)."""
    if values.ndim == weights.ndim:
        return np.einsum("...m,...m->...", weights, values)
    return np.einsum("...m,...mc->...c", weights, values)


def bilinear_attr(vertex_set: GaussianVertexSet, u: float, v: float) -> InterpolatedMaterial:
    """Interpolate one vertex set's material at (u, v), clamped to valid ranges."""
    w = vertex_weights(u, v, vertex_set.count)
    albedo = np.clip(interpolate(vertex_set.albedo, w), 0.0, 1.0)
    rough = float(np.clip(interpolate(vertex_set.roughness, w), R_MIN, 1.0))
    return InterpolatedMaterial(albedo, rough, interpolate(vertex_set.normal_offset, w))


def normals_from_offsets(rotations: np.ndarray, offsets: np.ndarray):
    """normalize(N^g + R dN) for stacked rotations (..., 3, 3) and tangent offsets (..., 3).

    Returns (normals, raw_norms); where the sum nearly vanishes the geometric normal is used.
    """
    s = rotations[..., :, 2] + np.einsum("...ij,...j->...i", rotations, offsets)
    norm = np.sqrt(np.einsum("...i,...i->...", s, s))
    ok = norm >= NORMAL_EPS
    n = np.where(ok[..., None], s / np.where(ok, norm, 1.0)[..., None], rotations[..., :, 2])
    return n, np.where(ok, norm, 0.0)


def shading_normal(gaussian: GaussianSurfel, vertex_set: GaussianVertexSet, u: float, v: float) -> np.ndarray:
    """World-space shading normal at (u, v) of a surfel."""
    w = vertex_weights(u, v, vertex_set.count)
    dn = interpolate(vertex_set.normal_offset, w)
    n, _ = normals_from_offsets(quat_to_rotmat(gaussian.rotation), dn)
    return n


def offset_grad(rotations, normals, raw_norms, g_normals):
    """Pull d loss/d normal back to the tangent-frame offsets; zero where the fallback was used."""
    ok = raw_norms > 0
    proj = g_normals - normals * np.einsum("...c,...c->...", g_normals, normals)[..., None]
    gs = proj / np.where(ok, raw_norms, 1.0)[..., None]
    gs = np.where(ok[..., None], gs, 0.0)
    return np.einsum("...ij,...i->...j", rotations, gs)
