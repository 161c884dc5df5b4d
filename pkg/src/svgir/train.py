"""Multi-stage material optimization and finite-difference gradient checking.

Stage 0 fits radiance and opacity to the images with the photometric loss,
stage 1 bakes micro-buffers from that radiance field, stage 2 optimizes the
vertex materials (albedo, roughness, normal offsets) against the full
objective. Albedo and opacity are optimized as logits, roughness as a logit
mapped to [0.04, 1].
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, InvalidStateError, NumericError
from .losses import (
    LossWeights, loss_normal_consistency, loss_normal_reg, loss_photometric, loss_radiance_consistency,
    loss_tv, specular_selection, srgb_encode, total_loss,
)
from .microbuffer import MicroBuffers
from .optim import Adam
from .raytrace import bake_microbuffers, build_bvh
from .render import incoming, radiance_colors, shade_vertices, view_directions
from .scene import R_MIN, Camera, Scene
from .shading import F0_DEFAULT
from .splat import Fragments, generate_fragments, rasterize_backward, rasterize_full

LOGIT_EPS = 1e-4


def _logit(p):
    p = np.clip(p, LOGIT_EPS, 1.0 - LOGIT_EPS)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class TrainConfig:
    stage0_iters: int = 200
    stage2_iters: int = 500
    k_samples: int = 64
    seed: int = 0
    lr: dict = field(default_factory=dict)
    weights: LossWeights = field(default_factory=LossWeights)
    rebake_every: int = 0  # 0 = bake once after stage 0
    srgb: bool = True
    f0: float = F0_DEFAULT

    def __post_init__(self):
        if self.stage0_iters < 0 or self.stage2_iters < 0:
            raise InvalidParameterError("iteration counts must be >= 0")
        if self.k_samples < 1:
            raise InvalidParameterError("k_samples must be >= 1")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)


@dataclass
class TrainResult:
    scene: Scene
    microbuffers: MicroBuffers | None
    log: list


@dataclass
class Evaluation:
    components: dict
    total: float
    grads: dict
    key: tuple


def material_objective(scene: Scene, mb: MicroBuffers, l_in, camera: Camera, gt, weights: LossWeights,
                       f0: float = F0_DEFAULT, srgb: bool = True, frags: Fragments | None = None,
                       grads: bool = True) -> Evaluation:
    """Full material objective for one view, with gradients w.r.t. vertex attributes and opacity."""
    g, vs = scene.gaussians, scene.vertex_sets
    res = shade_vertices(g, vs, mb, camera, l_in, f0, grads=grads)
    colors, back = res if grads else (res, None)
    bufs, ctx = rasterize_full(g, vs, camera, colors, frags)
    w_i = view_directions(g.positions, camera)
    sel = specular_selection(g.normals(), mb, w_i)
    comp = {}
    if not grads:
        comp["l1"], comp["ssim"] = loss_photometric(bufs.color, gt, srgb=srgb)
        comp["tv_albedo"] = loss_tv(bufs.albedo, gt)
        comp["tv_roughness"] = loss_tv(bufs.roughness, gt)
        comp["n"] = loss_normal_consistency(bufs.normal, bufs.depth, bufs.alpha, camera)
        comp["rc"] = loss_radiance_consistency(g, vs, mb, scene.environment, w_i, f0, selection=sel)
        comp["reg_n"] = loss_normal_reg(vs.normal_offset)
        return Evaluation(comp, total_loss(comp, weights), {}, _structure_key(ctx.frags, bufs, gt, sel, srgb, camera))
    w = weights
    comp["l1"], comp["ssim"], g_l1, g_ss = loss_photometric(bufs.color, gt, grad=True, srgb=srgb)
    comp["tv_albedo"], g_tva = loss_tv(bufs.albedo, gt, grad=True)
    comp["tv_roughness"], g_tvr = loss_tv(bufs.roughness, gt, grad=True)
    comp["n"], g_nm, g_dep, g_alp = loss_normal_consistency(bufs.normal, bufs.depth, bufs.alpha, camera, grad=True)
    comp["rc"], g_rc = loss_radiance_consistency(g, vs, mb, scene.environment, w_i, f0, grad=True, selection=sel)
    comp["reg_n"], g_reg = loss_normal_reg(vs.normal_offset, grad=True)
    total = total_loss(comp, w)
    rb = rasterize_backward(ctx, {
        "color": w.l1 * g_l1 + w.ssim * g_ss,
        "albedo": w.tv_albedo * g_tva,
        "roughness": w.tv_roughness * g_tvr,
        "normal": w.n * g_nm,
        "depth": w.n * g_dep,
        "alpha": w.n * g_alp,
    })
    gs = back(rb["vertex_colors"])
    out = {
        "albedo": gs["albedo"] + rb["albedo"] + w.rc * g_rc["albedo"],
        "roughness": gs["roughness"] + rb["roughness"] + w.rc * g_rc["roughness"],
        "normal_offset": gs["normal_offset"] + rb["normal_offset"] + w.rc * g_rc["normal_offset"]
        + w.reg_n * g_reg,
        "opacity": rb["opacity"],
    }
    return Evaluation(comp, total, out, _structure_key(ctx.frags, bufs, gt, sel, srgb, camera))


def _structure_key(frags, bufs, gt, sel, srgb, camera):
    """Discrete choices made by the objective; finite differences are only meaningful while it is fixed."""
    r = srgb_encode(bufs.color) if srgb else bufs.color
    t = srgb_encode(gt) if srgb else np.asarray(gt)
    sign = np.sign(r - t).astype(np.int8)
    fg = bufs.alpha > 0.5
    return (frags.signature(), hash(sign.tobytes()), hash(fg.tobytes()), hash(sel.tobytes()))


def radiance_objective(scene: Scene, camera: Camera, gt, weights: LossWeights, srgb: bool = True,
                       grads: bool = True) -> Evaluation:
    """Photometric loss of the plain radiance render (the pre-fit objective)."""
    g, vs = scene.gaussians, scene.vertex_sets
    m = vs.count
    colors = radiance_colors(g, m, camera)
    bufs, ctx = rasterize_full(g, vs, camera, colors)
    if not grads:
        l1, ss = loss_photometric(bufs.color, gt, srgb=srgb)
        comp = {"l1": l1, "ssim": ss}
        return Evaluation(comp, total_loss(comp, weights), {}, _structure_key(ctx.frags, bufs, gt,
                                                                             np.zeros(0, np.int64), srgb, camera))
    l1, ss, g_l1, g_ss = loss_photometric(bufs.color, gt, grad=True, srgb=srgb)
    comp = {"l1": l1, "ssim": ss}
    rb = rasterize_backward(ctx, {"color": weights.l1 * g_l1 + weights.ssim * g_ss})
    g_c = rb["vertex_colors"].sum(axis=1)
    if g.sh_degree == 0:
        g_rad = g_c
    else:
        d = view_directions(g.positions, camera)
        raw = g.radiance[:, 0] + np.einsum("nj,njc->nc", d, g.radiance[:, 1:])
        g_c = g_c * (raw > 0)
        g_rad = np.concatenate([g_c[:, None], d[:, :, None] * g_c[:, None, :]], axis=1)
    key = _structure_key(ctx.frags, bufs, gt, np.zeros(0, np.int64), srgb, camera)
    return Evaluation(comp, total_loss(comp, weights), {"radiance": g_rad, "opacity": rb["opacity"]}, key)


def _camera_order(n_cams: int, n_iters: int, rng) -> list:
    order = []
    while len(order) < n_iters:
        order.extend(int(i) for i in rng.permutation(n_cams))
    return order[:n_iters]


def _fmt(stage, it, cam, comp, total, wall):
    parts = " ".join(f"{k}={comp[k]:.9g}" for k in sorted(comp))
    return f"stage={stage} iter={it} cam={cam} {parts} total={total:.9g} wall={wall:.3f}"


def train(scene: Scene, config: TrainConfig | None = None, microbuffers: MicroBuffers | None = None,
          progress=None) -> TrainResult:
    """Run stages 0-2 on a copy of ``scene``; ground-truth images must be present for every camera."""
    cfg = config or TrainConfig()
    if not scene.cameras or any(im is None for im in scene.images) or len(scene.images) != len(scene.cameras):
        raise InvalidStateError("training needs a ground-truth image for every camera")
    sc = scene.copy()
    g, vs = sc.gaussians, sc.vertex_sets
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr)
    log = []
    t0 = time.perf_counter()

    def emit(line):
        log.append(line)
        if progress is not None:
            progress(line)

    # stage 0: radiance and opacity
    params = {"radiance": g.radiance, "opacity": _logit(g.opacities)}
    for it, ci in enumerate(_camera_order(len(sc.cameras), cfg.stage0_iters, rng)):
        g.opacities = _sigmoid(params["opacity"])
        ev = radiance_objective(sc, sc.cameras[ci], sc.images[ci], cfg.weights, cfg.srgb)
        o = g.opacities
        opt.step(params, {"radiance": ev.grads["radiance"], "opacity": ev.grads["opacity"] * o * (1 - o)})
        if g.sh_degree == 0:
            np.maximum(params["radiance"], 0.0, out=params["radiance"])
        else:
            np.maximum(params["radiance"][:, 0], 0.0, out=params["radiance"][:, 0])
        emit(_fmt(0, it, ci, ev.components, ev.total, time.perf_counter() - t0))
    if cfg.stage0_iters:
        g.opacities = _sigmoid(params["opacity"])
        g.radiance = params["radiance"]

    # stage 1: bake
    mb = microbuffers
    bvh = None
    if mb is None or cfg.stage0_iters > 0:
        bvh = build_bvh(g)
        mb = bake_microbuffers(g, bvh, cfg.k_samples, cfg.seed)
    l_in = incoming(mb, sc.environment)
    frags = [None] * len(sc.cameras)

    # stage 2: vertex materials
    params = {
        "albedo": _logit(vs.albedo),
        "roughness": _logit((vs.roughness - R_MIN) / (1.0 - R_MIN)),
        "normal_offset": vs.normal_offset,
    }
    opt = Adam(cfg.lr)
    for it, ci in enumerate(_camera_order(len(sc.cameras), cfg.stage2_iters, rng)):
        if cfg.rebake_every and it > 0 and it % cfg.rebake_every == 0:
            bvh = bvh or build_bvh(g)
            mb = bake_microbuffers(g, bvh, cfg.k_samples, cfg.seed)
            l_in = incoming(mb, sc.environment)
        sa = _sigmoid(params["albedo"])
        sr = _sigmoid(params["roughness"])
        vs.albedo = sa
        vs.roughness = R_MIN + (1.0 - R_MIN) * sr
        cam = sc.cameras[ci]
        if frags[ci] is None:
            frags[ci] = generate_fragments(g, cam)
        try:
            ev = material_objective(sc, mb, l_in, cam, sc.images[ci], cfg.weights, cfg.f0, cfg.srgb, frags[ci])
        except NumericError as e:
            raise NumericError(f"stage 2 iteration {it}: {e}") from e
        opt.step(params, {
            "albedo": ev.grads["albedo"] * sa * (1 - sa),
            "roughness": ev.grads["roughness"] * (1.0 - R_MIN) * sr * (1 - sr),
            "normal_offset": ev.grads["normal_offset"],
        })
        emit(_fmt(2, it, ci, ev.components, ev.total, time.perf_counter() - t0))
    if cfg.stage2_iters:
        vs.albedo = _sigmoid(params["albedo"])
        vs.roughness = R_MIN + (1.0 - R_MIN) * _sigmoid(params["roughness"])
        vs.normal_offset = params["normal_offset"]
    return TrainResult(sc, mb, log)


def strip_wall_time(lines) -> list:
    """Log lines without the wall-clock field, for run-to-run comparison."""
    return [ln.rsplit(" wall=", 1)[0] for ln in lines]


@dataclass
class GradCheckReport:
    max_rel_error: float
    entries: list  # (group, index, analytic, numeric, relative error)
    excluded: list  # (group, index, reason)


MATERIAL_GROUPS = ("albedo", "roughness", "normal_offset", "opacity")
REL_FLOOR = 1e-6


def relative_error(a: float, n: float, floor: float = REL_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor); 0 when both vanish."""
    if a == 0.0 and n == 0.0:
        return 0.0
    return abs(a - n) / max(abs(a), abs(n), floor)


def default_param_subset(scene: Scene, per_group: int = 4, seed: int = 0) -> list:
    """A few random (group, index) pairs from every parameter group."""
    rng = np.random.default_rng(seed)
    g, vs = scene.gaussians, scene.vertex_sets
    shapes = {"albedo": vs.albedo.shape, "roughness": vs.roughness.shape,
              "normal_offset": vs.normal_offset.shape, "opacity": g.opacities.shape, "radiance": g.radiance.shape}
    out = []
    for name, shp in shapes.items():
        for _ in range(per_group):
            out.append((name, tuple(int(rng.integers(0, s)) for s in shp)))
    return out


def _param_array(scene: Scene, group: str) -> np.ndarray:
    if group in ("opacity", "radiance"):
        return scene.gaussians.opacities if group == "opacity" else scene.gaussians.radiance
    return getattr(scene.vertex_sets, group)


def _bounds(group):
    return {"albedo": (0.0, 1.0), "roughness": (R_MIN, 1.0), "opacity": (0.0, 1.0),
            "radiance": (0.0, np.inf)}.get(group, (-np.inf, np.inf))


def grad_check(scene: Scene, mb: MicroBuffers, params=None, h: float = 1e-4, camera_index: int = 0,
               weights: LossWeights | None = None, f0: float = F0_DEFAULT, srgb: bool = True) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Material groups and opacity use the full material objective; radiance uses
    the pre-fit photometric objective, the only one it enters. Parameters whose
    +-h perturbation would cross a range bound or change the discrete structure
    of the objective are excluded and reported.
    """
    if not 1e-5 <= h <= 1e-3:
        raise InvalidParameterError(f"step h={h} outside [1e-5, 1e-3]")
    weights = weights or LossWeights()
    cam = scene.cameras[camera_index]
    gt = scene.images[camera_index]
    sc = scene.copy()
    sc.gaussians = scene.gaussians.copy()
    sc.vertex_sets = scene.vertex_sets.copy()
    l_in = incoming(mb, sc.environment)
    params = default_param_subset(sc) if params is None else params

    def evaluate(group, grads):
        if group == "radiance":
            return radiance_objective(sc, cam, gt, weights, srgb, grads=grads)
        return material_objective(sc, mb, l_in, cam, gt, weights, f0, srgb, grads=grads)

    base = {}
    entries, excluded = [], []
    worst = 0.0
    for group, idx in params:
        arr = _param_array(sc, group)
        x0 = float(arr[idx])
        lo, hi = _bounds(group)
        if x0 - h < lo or x0 + h > hi:
            excluded.append((group, idx, "clamp boundary within h"))
            continue
        kind = "radiance" if group == "radiance" else "material"
        if kind not in base:
            base[kind] = evaluate(group, True)
        analytic = float(base[kind].grads[group][idx])
        arr[idx] = x0 + h
        fp = evaluate(group, False)
        arr[idx] = x0 - h
        fm = evaluate(group, False)
        arr[idx] = x0
        if fp.key != base[kind].key or fm.key != base[kind].key:
            excluded.append((group, idx, "perturbation changes the fragment or loss structure"))
            continue
        numeric = (fp.total - fm.total) / (2.0 * h)
        rel = relative_error(analytic, numeric)
        worst = max(worst, rel)
        entries.append((group, idx, analytic, numeric, rel))
    return GradCheckReport(worst, entries, excluded)
