"""Image-set metrics: PSNR, SSIM, normal angular error, albedo-rescaled PSNR."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError
from .losses import ssim_map


def psnr(pred, gt, mask=None) -> float:
    """10 log10(1 / MSE) for signals in [0, 1]; ``inf`` for identical inputs."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidParameterError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = (pred - gt) ** 2
    if mask is not None:
        diff = diff[np.asarray(mask, bool)]
    if diff.size == 0:
        raise InvalidParameterError("empty comparison region")
    mse = float(diff.mean())
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def ssim(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidParameterError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if np.array_equal(pred, gt):
        return 1.0
    return float(ssim_map(pred, gt).mean())


def normal_mae(pred_normals, gt_normals, mask=None) -> float:
    """Mean angle in degrees between unit normal maps over the foreground."""
    a = np.asarray(pred_normals, dtype=np.float64)
    b = np.asarray(gt_normals, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is None:
        mask = (np.linalg.norm(a, axis=-1) > 0) & (np.linalg.norm(b, axis=-1) > 0)
    mask = np.asarray(mask, bool)
    if not mask.any():
        return 0.0
    a = a[mask]
    b = b[mask]
    a = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    cos = np.clip((a * b).sum(-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def albedo_scale(pred_albedo, gt_albedo, mask=None) -> np.ndarray:
    """Per-channel global factor mean(gt) / mean(pred) over the masked pixels."""
    p = np.asarray(pred_albedo, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt_albedo, dtype=np.float64).reshape(-1, 3)
    if p.shape != g.shape:
        raise InvalidParameterError(f"shape mismatch {p.shape} vs {g.shape}")
    if mask is not None:
        m = np.asarray(mask, bool).reshape(-1)
        p, g = p[m], g[m]
    pm = p.mean(axis=0)
    return np.where(pm > 0, g.mean(axis=0) / np.where(pm > 0, pm, 1.0), 1.0)


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)  # (metric, image id, value)

    def add(self, metric: str, image_id: str, value: float) -> None:
        self.rows.append((metric, image_id, float(value)))

    def values(self, metric: str) -> list:
        return [v for m, i, v in self.rows if m == metric and i != "mean"]

    def mean(self, metric: str) -> float:
        for m, i, v in self.rows:
            if m == metric and i == "mean":
                return v
        raise KeyError(metric)

    def lines(self) -> str:
        return "\n".join(f"{m} {i} {format_value(v)}" for m, i, v in self.rows)

    def table(self) -> str:
        metrics = list(dict.fromkeys(m for m, _, _ in self.rows))
        ids = list(dict.fromkeys(i for _, i, _ in self.rows))
        lookup = {(m, i): v for m, i, v in self.rows}
        w = max([len(i) for i in ids] + [5])
        out = ["image".ljust(w) + "".join(f"  {m:>14}" for m in metrics)]
        for i in ids:
            cells = "".join(f"  {format_value(lookup[(m, i)]) if (m, i) in lookup else '-':>14}" for m in metrics)
            out.append(i.ljust(w) + cells)
        return "\n".join(out)


def format_value(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"


def _mean(vals) -> float:
    # an average over sets that include identical images stays at inf
    return float(np.mean(vals)) if vals else math.nan


def evaluate(preds, gts, ids=None, pred_albedo=None, gt_albedo=None, pred_normals=None, gt_normals=None,
             masks=None, display=None) -> MetricsReport:
    """Per-image and mean metrics over matched image sets.

    ``display`` maps linear images to the [0, 1] signal that PSNR/SSIM compare
    (identity when omitted). With albedo maps, ``psnr_rescaled`` scales each
    predicted channel by the global ground-truth / predicted albedo ratio first.
    """
    display = display or (lambda x: x)
    if len(preds) != len(gts):
        raise InvalidParameterError(f"image counts differ: {len(preds)} vs {len(gts)}")
    ids = ids or [f"{i:03d}" for i in range(len(preds))]
    masks = masks if masks is not None else [None] * len(preds)
    scale = None
    if pred_albedo is not None and gt_albedo is not None:
        if len(pred_albedo) != len(gt_albedo):
            raise InvalidParameterError("albedo map counts differ")
        fgs = [m if m is not None else np.ones(a.shape[:2], bool) for m, a in zip(masks, gt_albedo)]
        scale = albedo_scale(np.concatenate([a[f] for a, f in zip(pred_albedo, fgs)]),
                             np.concatenate([a[f] for a, f in zip(gt_albedo, fgs)]))
    rep = MetricsReport()
    for i, (p, g) in enumerate(zip(preds, gts)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise InvalidParameterError(f"image {ids[i]}: shape mismatch {p.shape} vs {g.shape}")
        dp, dg = display(p), display(g)
        rep.add("psnr", ids[i], psnr(dp, dg))
        rep.add("ssim", ids[i], ssim(dp, dg))
        if scale is not None:
            rep.add("psnr_rescaled", ids[i], psnr(display(p * scale), dg))
        if pred_normals is not None and gt_normals is not None:
            rep.add("normal_mae", ids[i], normal_mae(pred_normals[i], gt_normals[i], masks[i]))
    for metric in list(dict.fromkeys(m for m, _, _ in rep.rows)):
        rep.add(metric, "mean", _mean(rep.values(metric)))
    return rep
