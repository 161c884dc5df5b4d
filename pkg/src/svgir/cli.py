"""Command-line entry point: ``svgir <command> ...``.

Exit status is 0 on success, 1 for invalid input or usage, 2 when a run fails.
Numerical modules are imported only after ``--threads`` has been applied.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
IMAGE_SUFFIXES = (".fimg", ".png", ".hdr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--k-samples", type=int, default=None, help="hemisphere samples per Gaussian (default 64)")
    p.add_argument("--vertices", type=int, default=None, help="vertices per Gaussian: 1, 2, 4 or 6 (default 4)")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="worker threads")
    p.add_argument("--output-dir", default=".", help="where results are written")
    p.add_argument("--config", default=None, help="JSON run config; flags given explicitly take precedence")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = _Parser(prog="svgir", description="Gaussian surfel rendering, baking, inverse rendering and relighting.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("render", parents=[common], help="render images and attribute maps")
    p.add_argument("scene")
    p.add_argument("--cache", help="micro-buffer cache to shade with (baked on the fly otherwise)")
    p.add_argument("--env", help="environment map overriding the scene's")
    p.add_argument("--radiance", action="store_true", help="render the radiance field instead of PBR shading")

    p = sub.add_parser("bake", parents=[common], help="trace and cache micro-buffers")
    p.add_argument("scene")
    p.add_argument("--force", action="store_true", help="rebake even if the cache file exists")

    p = sub.add_parser("train", parents=[common], help="fit radiance and materials to the scene's images")
    p.add_argument("scene")
    p.add_argument("--cache", help="micro-buffer cache used when radiance fitting is disabled")
    p.add_argument("--stage0-iters", type=int, default=None)
    p.add_argument("--stage2-iters", type=int, default=None)
    p.add_argument("--quiet", action="store_true", help="do not echo log lines")

    p = sub.add_parser("relight", parents=[common], help="render a trained scene under a new environment")
    p.add_argument("scene")
    p.add_argument("--env", required=True, help="new environment map (.fimg, .hdr or .png)")
    p.add_argument("--cache", help="micro-buffer cache (baked on the fly otherwise)")
    p.add_argument("--indirect-only", action="store_true", help="also write the one-bounce indirect term alone")

    p = sub.add_parser("eval", parents=[common], help="compare two image sets")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--pred-albedo")
    p.add_argument("--gt-albedo")
    p.add_argument("--pred-normals")
    p.add_argument("--gt-normals")
    p.add_argument("--glob", default="*", help="file pattern selecting images inside the directories")
    p.add_argument("--linear", action="store_true", help="compare linear values instead of sRGB-encoded ones")

    p = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    p.add_argument("scene")
    p.add_argument("--cache")
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--per-group", type=int, default=4)
    p.add_argument("--camera", type=int, default=0)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic fixture")
    p.add_argument("kind", help="single-surfel, two-plane-corner, occluder-dome or sphere-shell")
    p.add_argument("--res", type=int, default=None, help="image resolution")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra fixture parameter")
    return ap


def _apply_threads(n):
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    if "numba" not in sys.modules:
        os.environ["NUMBA_NUM_THREADS"] = str(n)
        return
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _settings(args) -> dict:
    from .io import load_config

    cfg = load_config(args.config) if args.config else {}
    for key, default in (("k_samples", 64), ("vertices", 4), ("seed", 0)):
        val = getattr(args, key)
        cfg[key] = val if val is not None else cfg.get(key, default)
    return cfg


def _out(args) -> Path:
    d = Path(args.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _image_set(path, pattern="*") -> tuple[list, list]:
    """Images in a directory (or one file) keyed by stem; float dumps win over PNG/HDR twins."""
    from .io import load_image

    p = Path(path)
    if p.is_file():
        files = [p]
    else:
        by_stem = {}
        for f in sorted(p.glob(pattern)):
            suf = f.suffix.lower()
            if suf in IMAGE_SUFFIXES and (f.stem not in by_stem or suf == ".fimg"):
                by_stem[f.stem] = f
        files = [by_stem[k] for k in sorted(by_stem)]
    if not files:
        from .errors import InvalidParameterError
        raise InvalidParameterError(f"no images found in {path}")
    return [f.stem for f in files], [load_image(f) for f in files]


def _microbuffers(args, scene, cfg):
    from .microbuffer import load_microbuffers
    from .raytrace import bake_microbuffers, build_bvh

    if getattr(args, "cache", None):
        mb = load_microbuffers(args.cache)
        if len(mb) != len(scene.gaussians):
            from .errors import InvalidParameterError
            raise InvalidParameterError(f"{args.cache} holds {len(mb)} buffers for {len(scene.gaussians)} Gaussians")
        return mb
    return bake_microbuffers(scene.gaussians, build_bvh(scene.gaussians), int(cfg["k_samples"]), int(cfg["seed"]))


def _write_buffers(out: Path, tag: str, i: int, bufs, with_attributes: bool = True):
    from .io import save_float_image, save_png

    save_png(out / f"{tag}_{i:03d}.png", bufs.color)
    save_float_image(out / f"{tag}_{i:03d}.fimg", bufs.color)
    if with_attributes:
        save_float_image(out / f"albedo_{i:03d}.fimg", bufs.albedo)
        save_float_image(out / f"roughness_{i:03d}.fimg", bufs.roughness)
        save_float_image(out / f"normal_{i:03d}.fimg", bufs.normal)
        save_float_image(out / f"depth_{i:03d}.fimg", bufs.depth)
        save_float_image(out / f"alpha_{i:03d}.fimg", bufs.alpha)


def cmd_render(args, cfg):
    from .io import load_environment, load_scene
    from .render import render_pbr, render_radiance

    scene = load_scene(args.scene)
    out = _out(args)
    env = load_environment(args.env) if args.env else None
    mb = None if args.radiance else _microbuffers(args, scene, cfg)
    for i, cam in enumerate(scene.cameras):
        bufs = render_radiance(scene, cam) if args.radiance else render_pbr(scene, mb, cam, env)
        _write_buffers(out, "render", i, bufs)
    print(f"rendered {len(scene.cameras)} view(s) to {out}")


def cmd_bake(args, cfg):
    from .io import load_scene
    from .microbuffer import save_microbuffers

    out = _out(args) / "microbuffers.svmb"
    if out.exists() and not args.force:
        print(f"{out} exists; pass --force to rebake")
        return
    scene = load_scene(args.scene)
    save_microbuffers(out, _microbuffers(args, scene, cfg))
    print(f"baked {len(scene.gaussians)} micro-buffers (K={cfg['k_samples']}) to {out}")


def cmd_train(args, cfg):
    from .io import load_scene, save_config, save_scene
    from .losses import LossWeights
    from .microbuffer import save_microbuffers
    from .scene import VertexSets
    from .train import TrainConfig, strip_wall_time, train

    scene = load_scene(args.scene)
    m = int(cfg["vertices"])
    if scene.vertex_sets.count != m or len(scene.vertex_sets) != len(scene.gaussians):
        scene.vertex_sets = VertexSets.uniform(len(scene.gaussians), m)
    tc = TrainConfig(
        stage0_iters=args.stage0_iters if args.stage0_iters is not None else int(cfg.get("stage0_iters", 200)),
        stage2_iters=args.stage2_iters if args.stage2_iters is not None else int(cfg.get("stage2_iters", 500)),
        k_samples=int(cfg["k_samples"]), seed=int(cfg["seed"]), lr=dict(cfg.get("lr", {})),
        weights=LossWeights(**cfg.get("weights", {})), rebake_every=int(cfg.get("rebake_every", 0)),
        srgb=bool(cfg.get("srgb", True)), f0=float(cfg.get("f0", 0.04)),
    )
    mb = _microbuffers(args, scene, cfg) if args.cache else None
    res = train(scene, tc, mb, progress=None if args.quiet else print)
    out = _out(args)
    save_scene(out / "trained.json", res.scene)
    save_microbuffers(out / "microbuffers.svmb", res.microbuffers)
    (out / "train.log").write_text("\n".join(strip_wall_time(res.log)) + "\n")
    save_config(out / "run_config.json", {**cfg, "stage0_iters": tc.stage0_iters, "stage2_iters": tc.stage2_iters})
    print(f"trained scene written to {out / 'trained.json'}")


def cmd_relight(args, cfg):
    from .io import load_environment, load_scene
    from .relight import relight_incoming, relight_render

    scene = load_scene(args.scene)
    env = load_environment(args.env)
    mb = _microbuffers(args, scene, cfg)
    out = _out(args)
    l_full = relight_incoming(scene, mb, env)
    l_ind = relight_incoming(scene, mb, env, indirect_only=True) if args.indirect_only else None
    for i, cam in enumerate(scene.cameras):
        _write_buffers(out, "relit", i, relight_render(scene, mb, env, cam, l_in=l_full), with_attributes=False)
        if l_ind is not None:
            _write_buffers(out, "indirect", i, relight_render(scene, mb, env, cam, l_in=l_ind), with_attributes=False)
    print(f"relit {len(scene.cameras)} view(s) to {out}")


def cmd_eval(args, cfg):
    import numpy as np

    from .errors import InvalidParameterError
    from .losses import srgb_encode
    from .metrics import evaluate

    ids, preds = _image_set(args.pred, args.glob)
    _, gts = _image_set(args.gt, args.glob)
    if len(preds) != len(gts):
        raise InvalidParameterError(f"{len(preds)} predicted vs {len(gts)} ground-truth images")
    extra = {}
    for key in ("albedo", "normals"):
        a, b = getattr(args, f"pred_{key}"), getattr(args, f"gt_{key}")
        if (a is None) != (b is None):
            raise InvalidParameterError(f"--pred-{key} and --gt-{key} go together")
        if a is not None:
            extra[f"pred_{key}"] = _image_set(a)[1]
            extra[f"gt_{key}"] = _image_set(b)[1]
    display = None if args.linear else (lambda x: np.clip(srgb_encode(np.maximum(x, 0.0)), 0.0, 1.0))
    rep = evaluate(preds, gts, ids, display=display, **extra)
    print(rep.table())
    out = _out(args)
    (out / "metrics.txt").write_text(rep.lines() + "\n")


def cmd_gradcheck(args, cfg):
    from .errors import InvalidParameterError
    from .io import load_scene
    from .train import default_param_subset, grad_check

    scene = load_scene(args.scene)
    if not 0 <= args.camera < len(scene.cameras) or scene.images[args.camera] is None:
        raise InvalidParameterError(f"camera {args.camera} has no ground-truth image")
    mb = _microbuffers(args, scene, cfg)
    params = default_param_subset(scene, args.per_group, int(cfg["seed"]))
    rep = grad_check(scene, mb, params, h=args.step, camera_index=args.camera)
    lines = [f"{grp} {idx} analytic={a:.9g} numeric={n:.9g} rel={e:.3g}" for grp, idx, a, n, e in rep.entries]
    lines += [f"{grp} {idx} excluded ({why})" for grp, idx, why in rep.excluded]
    lines.append(f"max_rel_error {rep.max_rel_error:.6g}")
    text = "\n".join(lines)
    print(text)
    (_out(args) / "gradcheck.txt").write_text(text + "\n")


def _parse_value(text):
    import json

    try:
        return json.loads(text)
    except ValueError:
        return text


def cmd_synth(args, cfg):
    from .io import save_float_image, save_png, save_scene
    from .microbuffer import save_microbuffers
    from .synthetic import make_synthetic_scene

    params = {"k": int(cfg["k_samples"]), "m": int(cfg["vertices"])}
    params.update(cfg.get("fixture", {}))
    if args.res is not None:
        params["res"] = args.res
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        params[key] = _parse_value(val)
    bundle = make_synthetic_scene(args.kind, params, int(cfg["seed"]))
    out = _out(args)
    save_scene(out / "scene.json", bundle.scene)
    save_microbuffers(out / "microbuffers.svmb", bundle.microbuffers)
    for i, bufs in enumerate(bundle.attributes):
        _write_buffers(out, "gt", i, bufs)
    save_float_image(out / "environment.fimg", bundle.scene.environment.radiance)
    save_png(out / "environment.png", bundle.scene.environment.radiance)
    print(f"{args.kind}: {len(bundle.scene.gaussians)} Gaussians, {len(bundle.scene.cameras)} view(s) -> {out}")


COMMANDS = {
    "render": cmd_render, "bake": cmd_bake, "train": cmd_train, "relight": cmd_relight,
    "eval": cmd_eval, "gradcheck": cmd_gradcheck, "synth": cmd_synth,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        _apply_threads(args.threads)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    from .errors import InvalidParameterError

    try:
        cfg = _settings(args)
        COMMANDS[args.command](args, cfg)
    except (InvalidParameterError, UsageError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"svgir {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"svgir {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
