"""Spatially-varying Gaussian surfel rendering, ray tracing and inverse rendering.

Submodules are imported lazily so that thread settings can be applied before
numba initializes (see ``svgir.cli``).
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "Gaussians": "scene", "VertexSets": "scene", "Camera": "scene", "EnvironmentMap": "scene", "Scene": "scene",
    "MicroBuffers": "microbuffer", "load_microbuffers": "microbuffer", "save_microbuffers": "microbuffer",
    "build_bvh": "raytrace", "trace_ray": "raytrace", "bake_microbuffers": "raytrace",
    "render_pbr": "render", "render_radiance": "render",
    "relight_render": "relight", "one_bounce_indirect": "relight",
    "LossWeights": "losses", "total_loss": "losses",
    "TrainConfig": "train", "train": "train", "grad_check": "train",
    "reference_one_bounce": "oracle", "reference_constant_render": "oracle",
    "make_synthetic_scene": "synthetic",
    "load_scene": "io", "save_scene": "io",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
