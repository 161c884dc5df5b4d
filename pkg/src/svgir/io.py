"""File formats: scene documents, float image dumps, RGBE environment maps, PNG, run configs.

Float image dump (little-endian)::

    magic    8 bytes  b"SVGFIMG1"
    width    uint32
    height   uint32
    pixels   width*height*3 float32, row-major, RGB interleaved

RGBE files follow the Radiance .hdr layout: a text header ending in a blank
line, a ``-Y H +X W`` resolution line, then scanlines. Files written here are
flat (uncompressed); the reader also accepts run-length-encoded scanlines.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidParameterError
from .losses import srgb_decode, srgb_encode
from .scene import Camera, EnvironmentMap, Gaussians, Scene, VertexSets

FLOAT_MAGIC = b"SVGFIMG1"
SCENE_FORMAT = "svgir-scene"
SCENE_VERSION = 1


# float dumps

def save_float_image(path, img) -> None:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    if a.ndim != 3 or a.shape[2] != 3:
        raise InvalidParameterError(f"float dumps hold (H, W, 3) images, got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOAT_MAGIC)
        fh.write(np.array([w, h], dtype="<u4").tobytes())
        fh.write(a.astype("<f4").tobytes())


def load_float_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != FLOAT_MAGIC or len(data) < 16:
        raise InvalidParameterError(f"{path}: not a float image dump")
    w, h = (int(x) for x in np.frombuffer(data[8:16], dtype="<u4"))
    px = np.frombuffer(data[16:], dtype="<f4")
    if px.size != w * h * 3:
        raise InvalidParameterError(f"{path}: expected {w * h * 3} floats, found {px.size}")
    return px.reshape(h, w, 3).astype(np.float64)


# RGBE

def _rgbe_encode(img) -> np.ndarray:
    a = np.maximum(np.asarray(img, dtype=np.float64), 0.0)
    v = a.max(axis=-1)
    m, e = np.frexp(v)
    ok = v >= 1e-32
    scale = np.where(ok, m * 256.0 / np.where(ok, v, 1.0), 0.0)
    out = np.zeros(a.shape[:-1] + (4,), np.uint8)
    out[..., :3] = np.floor(a * scale[..., None]).clip(0, 255).astype(np.uint8)
    out[..., 3] = np.where(ok, e + 128, 0).astype(np.uint8)
    return out


def _rgbe_decode(rgbe: np.ndarray) -> np.ndarray:
    e = rgbe[..., 3].astype(np.int32)
    f = np.where(e > 0, np.ldexp(1.0, e - 136), 0.0)
    return (rgbe[..., :3].astype(np.float64) + 0.5) * f[..., None] * (e > 0)[..., None]


def save_rgbe(path, img) -> None:
    a = np.asarray(img, dtype=np.float64)
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n")
        fh.write(f"-Y {h} +X {w}\n".encode())
        fh.write(_rgbe_encode(a).tobytes())


def load_rgbe(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"#?"):
        raise InvalidParameterError(f"{path}: missing RGBE signature")
    end = data.find(b"\n\n")
    if end < 0:
        raise InvalidParameterError(f"{path}: truncated RGBE header")
    pos = data.find(b"\n", end + 2)
    res = data[end + 2:pos].decode("ascii").split()
    if len(res) != 4 or res[0] != "-Y" or res[2] != "+X":
        raise InvalidParameterError(f"{path}: unsupported RGBE orientation {' '.join(res)}")
    h, w = int(res[1]), int(res[3])
    body = np.frombuffer(data[pos + 1:], dtype=np.uint8)
    if body.size == h * w * 4 and not (w >= 8 and body.size >= 2 and body[0] == 2 and body[1] == 2):
        return _rgbe_decode(body.reshape(h, w, 4))
    out = np.zeros((h, w, 4), np.uint8)
    i = 0
    for y in range(h):
        if body[i] != 2 or body[i + 1] != 2:
            # old-style flat scanline
            out[y] = body[i:i + 4 * w].reshape(w, 4)
            i += 4 * w
            continue
        i += 4
        for c in range(4):
            x = 0
            while x < w:
                n = int(body[i])
                i += 1
                if n > 128:
                    n -= 128
                    out[y, x:x + n, c] = body[i]
                    i += 1
                else:
                    out[y, x:x + n, c] = body[i:i + n]
                    i += n
                x += n
    return _rgbe_decode(out)


# PNG

def save_png(path, linear_img) -> None:
    a = np.asarray(linear_img, dtype=np.float64)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    enc = np.clip(srgb_encode(np.maximum(a, 0.0)), 0.0, 1.0)
    Image.fromarray(np.round(enc * 255.0).astype(np.uint8), "RGB").save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_decode(a)


def load_image(path) -> np.ndarray:
    """Linear RGB image from a float dump, RGBE file or (sRGB) PNG."""
    p = Path(path)
    suffix = p.suffix.lower()
    if suffix == ".png":
        return load_png(p)
    if suffix in (".hdr", ".rgbe", ".pic"):
        return load_rgbe(p)
    return load_float_image(p)


def load_environment(path) -> EnvironmentMap:
    img = load_image(path)
    if not np.all(np.isfinite(img)) or np.any(img < 0):
        raise InvalidParameterError(f"{path}: environment radiance must be finite and >= 0")
    return EnvironmentMap(img)


# scenes

def scene_to_dict(scene: Scene, environment_path: str, image_paths=None) -> dict:
    g, vs = scene.gaussians, scene.vertex_sets
    image_paths = image_paths or [None] * len(scene.cameras)
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "gaussians": [
            {"position": g.positions[i].tolist(), "quaternion": g.quaternions[i].tolist(),
             "scale": g.scales[i].tolist(), "opacity": float(g.opacities[i]), "radiance": g.radiance[i].tolist()}
            for i in range(len(g))
        ],
        "vertex_sets": [
            {"albedo": vs.albedo[i].tolist(), "roughness": vs.roughness[i].tolist(),
             "normal_offset": vs.normal_offset[i].tolist()}
            for i in range(len(vs))
        ],
        "environment": environment_path,
        "cameras": [
            {"intrinsics": {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height},
             "extrinsics": {"rotation": c.rotation.tolist(), "translation": c.translation.tolist()},
             "image_path": ip}
            for c, ip in zip(scene.cameras, image_paths)
        ],
    }


def save_scene(path, scene: Scene, save_images: bool = True) -> None:
    """Write ``path`` plus the environment (and ground-truth images) as float dumps beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    env_name = f"{stem}_environment.fimg"
    save_float_image(path.parent / env_name, scene.environment.radiance)
    image_paths = []
    for i, img in enumerate(scene.images if save_images else []):
        if img is None:
            image_paths.append(None)
            continue
        name = f"{stem}_image_{i:03d}.fimg"
        save_float_image(path.parent / name, img)
        image_paths.append(name)
    image_paths += [None] * (len(scene.cameras) - len(image_paths))
    doc = scene_to_dict(scene, env_name, image_paths)
    path.write_text(json.dumps(doc, indent=1))


def _arr(x, shape=None):
    a = np.asarray(x, dtype=np.float64)
    if shape is not None and a.shape != shape:
        raise InvalidParameterError(f"expected shape {shape}, got {a.shape}")
    return a


def scene_from_dict(doc: dict, base_dir=".") -> Scene:
    base = Path(base_dir)
    try:
        gs = doc["gaussians"]
        vss = doc["vertex_sets"]
        if not gs:
            raise InvalidParameterError("scene has no gaussians")
        rad = [np.asarray(x["radiance"], dtype=np.float64) for x in gs]
        if len({r.shape for r in rad}) != 1:
            raise InvalidParameterError("all gaussians must use the same radiance layout")
        g = Gaussians([x["position"] for x in gs], [x["quaternion"] for x in gs], [x["scale"] for x in gs],
                      [x["opacity"] for x in gs], np.stack(rad))
        if vss:
            vs = VertexSets(np.stack([_arr(v["albedo"]) for v in vss]), np.stack([_arr(v["roughness"]) for v in vss]),
                            np.stack([_arr(v["normal_offset"]) for v in vss]))
        else:
            vs = VertexSets(np.zeros((0, 4, 3)), np.zeros((0, 4)), np.zeros((0, 4, 3)))
        env_ref = doc["environment"]
        env = load_environment(base / env_ref) if isinstance(env_ref, str) else EnvironmentMap(_arr(env_ref))
        cams, images = [], []
        for c in doc.get("cameras", []):
            k, e = c["intrinsics"], c["extrinsics"]
            cams.append(Camera(k["fx"], k["fy"], k["cx"], k["cy"], k["width"], k["height"],
                               _arr(e["rotation"], (3, 3)), _arr(e["translation"], (3,))))
            ip = c.get("image_path")
            images.append(load_image(base / ip) if ip else None)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidParameterError):
            raise
        raise InvalidParameterError(f"malformed scene document: {exc!r}") from exc
    return Scene(g, vs, env, cams, images)


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidParameterError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != SCENE_FORMAT:
        raise InvalidParameterError(f"{path}: not a {SCENE_FORMAT} document")
    return scene_from_dict(doc, path.parent)


# run configs

def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidParameterError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise InvalidParameterError(f"{path}: config must be a JSON object")
    return cfg


def save_config(path, cfg: dict) -> None:
    Path(path).write_text(json.dumps(cfg, indent=1, sort_keys=True))
