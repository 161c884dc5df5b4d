"""Scene data model: Gaussian surfels, Gaussian vertex sets, cameras and environment maps.

Per-Gaussian data is stored as arrays (structure of arrays) so the renderer can
work on whole scenes at once; indexing a container returns a single-element view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import InvalidParameterError

R_MIN = 0.04
DEFAULT_VERTEX_COUNT = 4
SUPPORTED_VERTEX_COUNTS = (1, 2, 4, 6)

# Normalized tangent coordinates of the Gaussian vertices for each supported M.
VERTEX_LAYOUTS = {
    1: np.array([[0.0, 0.0]]),
    2: np.array([[-1.0, 0.0], [1.0, 0.0]]),
    4: np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]]),
    6: np.array([[-1.0, -1.0], [0.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [0.0, 1.0], [1.0, 1.0]]),
}


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return np.concatenate([[math.cos(h)], math.sin(h) * axis])


def quat_from_rotmat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a single 3x3 rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def quat_aligning_z(normal) -> np.ndarray:
    """A quaternion whose rotation maps +z onto ``normal`` (tangent frame is arbitrary but fixed)."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    tu = np.cross(helper, n)
    tu /= np.linalg.norm(tu)
    tv = np.cross(n, tu)
    return quat_from_rotmat(np.stack([tu, tv, n], axis=1))


def build_covariance(rotation, scale) -> np.ndarray:
    """World-space covariance R diag(sx^2, sy^2, 0) R^T of a surfel.

    Accepts a single quaternion / 2-vector or stacked (N, 4) / (N, 2) arrays.
    """
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(~(scale > 0)):
        raise InvalidParameterError(f"surfel scales must be strictly positive, got {scale.tolist()}")
    r = quat_to_rotmat(rotation)
    s2 = np.zeros(scale.shape[:-1] + (3,))
    s2[..., :2] = scale**2
    return np.einsum("...ij,...j,...kj->...ik", r, s2, r)


def geometric_normal(rotation) -> np.ndarray:
    """Third column of the rotation matrix (the surfel normal N^g)."""
    return quat_to_rotmat(rotation)[..., :, 2]


@dataclass
class GaussianSurfel:
    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    radiance: np.ndarray


@dataclass
class GaussianVertexSet:
    albedo: np.ndarray
    roughness: np.ndarray
    normal_offset: np.ndarray

    @property
    def count(self) -> int:
        return self.roughness.shape[0]


@dataclass
class Gaussians:
    """Surfel attributes for N Gaussians.

    ``radiance`` is (N, 3) plain RGB, or (N, 4, 3) for degree-1 view-dependent
    radiance where row 0 is the constant term and rows 1..3 multiply the x, y, z
    components of the viewing direction.
    """

    positions: np.ndarray
    quaternions: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    radiance: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=np.float64).reshape(-1, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1, 2)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(-1)
        rad = np.asarray(self.radiance, dtype=np.float64)
        self.radiance = rad.reshape(-1, 3) if rad.ndim <= 2 else rad

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> GaussianSurfel:
        return GaussianSurfel(
            self.positions[i], self.quaternions[i], self.scales[i], float(self.opacities[i]), self.radiance[i]
        )

    @property
    def sh_degree(self) -> int:
        return 1 if self.radiance.ndim == 3 else 0

    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.quaternions)

    def normals(self) -> np.ndarray:
        return self.rotations()[:, :, 2]

    def copy(self) -> "Gaussians":
        return Gaussians(
            self.positions.copy(), self.quaternions.copy(), self.scales.copy(),
            self.opacities.copy(), self.radiance.copy(),
        )

    def radiance_toward(self, directions: np.ndarray) -> np.ndarray:
        """Radiance leaving each Gaussian along unit ``directions`` (N, 3)."""
        if self.sh_degree == 0:
            return self.radiance
        c = self.radiance[:, 0] + np.einsum("nj,njc->nc", directions, self.radiance[:, 1:])
        return np.maximum(c, 0.0)

    @classmethod
    def concatenate(cls, parts) -> "Gaussians":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("positions", "quaternions", "scales", "opacities", "radiance")))


@dataclass
class VertexSets:
    """Material attributes of M Gaussian vertices for each of N Gaussians."""

    albedo: np.ndarray  # (N, M, 3)
    roughness: np.ndarray  # (N, M)
    normal_offset: np.ndarray  # (N, M, 3), tangent frame

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.roughness = np.asarray(self.roughness, dtype=np.float64)
        self.normal_offset = np.asarray(self.normal_offset, dtype=np.float64)

    def __len__(self) -> int:
        return self.albedo.shape[0]

    def __getitem__(self, i: int) -> GaussianVertexSet:
        return GaussianVertexSet(self.albedo[i], self.roughness[i], self.normal_offset[i])

    @property
    def count(self) -> int:
        return self.albedo.shape[1]

    def copy(self) -> "VertexSets":
        return VertexSets(self.albedo.copy(), self.roughness.copy(), self.normal_offset.copy())

    @classmethod
    def uniform(cls, n: int, m: int = DEFAULT_VERTEX_COUNT, albedo=0.5, roughness=0.5) -> "VertexSets":
        if m not in SUPPORTED_VERTEX_COUNTS:
            raise InvalidParameterError(f"unsupported vertex count M={m}")
        a = np.broadcast_to(np.asarray(albedo, dtype=np.float64), (n, m, 3)).copy()
        r = np.broadcast_to(np.asarray(roughness, dtype=np.float64), (n, m)).copy()
        return cls(a, r, np.zeros((n, m, 3)))

    @classmethod
    def concatenate(cls, parts) -> "VertexSets":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("albedo", "roughness", "normal_offset")))


@dataclass
class Camera:
    """Pinhole camera. ``rotation``/``translation`` map world to camera: x_c = R x_w + t.

    Camera axes: x right, y down, z forward. Pixel (i, j) has its center at (j + 0.5, i + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, focal: float, width: int, height: int) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(focal, focal, width / 2.0, height / 2.0, width, height, rot, -rot @ eye)

    def pixel_rays(self) -> np.ndarray:
        """Camera-space ray directions (H, W, 3) with unit z component."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = xs[None, :]
        rays[..., 1] = ys[:, None]
        rays[..., 2] = 1.0
        return rays

    def world_rays(self) -> np.ndarray:
        """Unit world-space directions (H, W, 3) through every pixel center."""
        d = self.pixel_rays() @ self.rotation
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@njit(cache=True)
def _env_texel(radiance, x, y, z):
    h, w = radiance.shape[0], radiance.shape[1]
    phi = math.atan2(y, x)
    zc = min(1.0, max(-1.0, z))
    theta = math.acos(zc)
    fc = (phi + math.pi) / (2.0 * math.pi) * w - 0.5
    fr = theta / math.pi * h - 0.5
    c0 = math.floor(fc)
    r0 = math.floor(fr)
    tc = fc - c0
    tr = fr - r0
    c0i = int(c0) % w
    c1i = (c0i + 1) % w
    r0i = min(max(int(r0), 0), h - 1)
    r1i = min(max(int(r0) + 1, 0), h - 1)
    out = np.empty(3)
    for ch in range(3):
        top = radiance[r0i, c0i, ch] * (1.0 - tc) + radiance[r0i, c1i, ch] * tc
        bot = radiance[r1i, c0i, ch] * (1.0 - tc) + radiance[r1i, c1i, ch] * tc
        out[ch] = top * (1.0 - tr) + bot * tr
    return out


@njit(cache=True)
def _env_lookup(radiance, dirs):
    out = np.empty((dirs.shape[0], 3))
    for i in range(dirs.shape[0]):
        out[i] = _env_texel(radiance, dirs[i, 0], dirs[i, 1], dirs[i, 2])
    return out


@dataclass
class EnvironmentMap:
    """Equirectangular radiance map; +z is up, longitude atan2(y, x) runs along columns."""

    radiance: np.ndarray  # (H, W, 3)

    def __post_init__(self):
        self.radiance = np.ascontiguousarray(self.radiance, dtype=np.float64)

    @property
    def height(self) -> int:
        return self.radiance.shape[0]

    @property
    def width(self) -> int:
        return self.radiance.shape[1]

    @classmethod
    def constant(cls, value, height: int = 8, width: int = 16) -> "EnvironmentMap":
        rgb = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,))
        return cls(np.broadcast_to(rgb, (height, width, 3)).copy())

    def lookup(self, directions: np.ndarray) -> np.ndarray:
        """Bilinear radiance along unit directions of shape (..., 3)."""
        d = np.asarray(directions, dtype=np.float64)
        flat = np.ascontiguousarray(d.reshape(-1, 3))
        return _env_lookup(self.radiance, flat).reshape(d.shape)

    def scaled(self, s: float) -> "EnvironmentMap":
        return EnvironmentMap(self.radiance * s)


@dataclass
class Scene:
    gaussians: Gaussians
    vertex_sets: VertexSets
    environment: EnvironmentMap
    cameras: list = field(default_factory=list)
    images: list = field(default_factory=list)  # ground-truth (H, W, 3) linear images or None

    def copy(self) -> "Scene":
        return Scene(self.gaussians.copy(), self.vertex_sets.copy(), self.environment,
                     list(self.cameras), list(self.images))


def validate_scene(scene: Scene) -> list[str]:
    """Return human-readable invariant violations; an empty list means the scene is valid."""
    out: list[str] = []
    g, vs = scene.gaussians, scene.vertex_sets
    if len(g) != len(vs):
        out.append(f"structure: {len(g)} gaussians but {len(vs)} vertex sets")
    if vs.albedo.ndim != 3 or vs.count not in SUPPORTED_VERTEX_COUNTS:
        out.append(f"structure: unsupported vertex count {vs.albedo.shape[1:2]}")
    qn = np.linalg.norm(g.quaternions, axis=1)
    for i in range(len(g)):
        if not np.all(np.isfinite(g.positions[i])):
            out.append(f"gaussian {i}: non-finite position")
        if abs(qn[i] - 1.0) > 1e-6:
            out.append(f"gaussian {i}: quaternion norm {qn[i]:.9g} is not 1")
        if not np.all(g.scales[i] > 0):
            out.append(f"gaussian {i}: scale {g.scales[i].tolist()} must be strictly positive")
        if not 0.0 <= g.opacities[i] <= 1.0:
            out.append(f"gaussian {i}: opacity {g.opacities[i]} outside [0, 1]")
        rad = g.radiance[i] if g.sh_degree == 0 else g.radiance[i, 0]
        if not np.all(rad >= 0):
            out.append(f"gaussian {i}: radiance {np.asarray(rad).tolist()} has negative components")
    for i in range(len(vs)):
        a, r, dn = vs.albedo[i], vs.roughness[i], vs.normal_offset[i]
        if not np.all((a >= 0) & (a <= 1)):
            out.append(f"vertex set {i}: albedo outside [0, 1]")
        if not np.all((r >= R_MIN) & (r <= 1)):
            out.append(f"vertex set {i}: roughness outside [{R_MIN}, 1]")
        if not np.all(np.isfinite(dn)):
            out.append(f"vertex set {i}: non-finite normal offset")
    env = scene.environment.radiance
    if not np.all(np.isfinite(env)) or np.any(env < 0):
        out.append("environment: radiance must be finite and non-negative")
    for c, cam in enumerate(scene.cameras):
        if not (cam.fx > 0 and cam.fy > 0):
            out.append(f"camera {c}: focal lengths must be positive")
        if not (0 <= cam.cx <= cam.width and 0 <= cam.cy <= cam.height):
            out.append(f"camera {c}: principal point outside the image")
        if np.abs(cam.rotation @ cam.rotation.T - np.eye(3)).max() > 1e-6:
            out.append(f"camera {c}: rotation is not orthonormal")
        if c < len(scene.images) and scene.images[c] is not None:
            if scene.images[c].shape[:2] != (cam.height, cam.width):
                out.append(f"camera {c}: image shape {scene.images[c].shape[:2]} does not match "
                           f"{cam.height}x{cam.width}")
    return out
