"""Command-line entry point: ``python -m motionforcing <command>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("motionforcing")

EVAL_WORLD = {"event_prob": 0.0, "min_separation": 3.0, "inside_margin": 1.0}


def _config(args):
    from .config import load_config

    return load_config(args.config, args.set)


def cmd_gen_data(args) -> int:
    from .worldgen import Scene, generate_scene, random_scene_spec, write_dataset

    cfg = _config(args)
    world = cfg.world
    if args.eval:
        world = replace(world, **EVAL_WORLD)
    seeds = range(args.seed, args.seed + args.scenes)

    def scenes():
        for i, seed in enumerate(seeds):
            spec = random_scene_spec(seed, world)
            if i % 100 == 0:
                log.info("scene %d/%d", i, args.scenes)
            yield Scene(spec, generate_scene(spec))

    manifest = write_dataset(scenes(), args.out)
    log.info("wrote %d scenes to %s (depth_max %.2f)", len(manifest["scenes"]), args.out, manifest["depth_max"])
    return 0


def cmd_train(args) -> int:
    from .forcing import train

    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    path = train(cfg, args.data, args.out, resume=args.resume)
    log.info("final checkpoint %s", path)
    return 0


def _load_depth0(path):
    """First-frame depth and validity from a frames file or ``.npy``."""
    from .worldgen import read_frames

    path = Path(path)
    if path.suffix == ".npy":
        d = np.load(path)
        d = d[0] if d.ndim == 3 else d
        return d.astype(np.float64), d > 0
    arrays = read_frames(path)
    d = arrays["depth"][0, ..., 0].astype(np.float64)
    valid = arrays["validity"][0, ..., 0] > 0.5 if "validity" in arrays else d > 0
    return d, valid


def _load_reference(path):
    """``(I_0, D_0 or None, valid or None)`` from a PNG or a frames file."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        import matplotlib.image as mpimg

        img = np.asarray(mpimg.imread(path), dtype=np.float32)[..., :3]
        return img, None, None
    from .worldgen import read_frames

    arrays = read_frames(path)
    d0 = v0 = None
    if "depth" in arrays:
        d0 = arrays["depth"][0, ..., 0].astype(np.float64)
        v0 = arrays["validity"][0, ..., 0] > 0.5 if "validity" in arrays else d0 > 0
    return arrays["appearance"][0], d0, v0


def cmd_warp(args) -> int:
    from .camera_warp import warp_depth
    from .worldgen import read_poses, write_frames

    poses = read_poses(args.poses)
    d0, valid = _load_depth0(args.depth)
    warped = warp_depth(d0, valid, poses, splat_value=args.splat_value)
    write_frames(Path(args.out), {"depth": warped.depth[..., None],
                                  "holes": warped.holes[..., None].astype(np.float32)})
    log.info("warped %d frames, %.1f%% holes", len(poses), 100 * warped.holes.mean())
    return 0


def _save_png(path, img):
    import matplotlib.pyplot as plt

    plt.imsave(path, np.clip(img, 0.0, 1.0))


def _depth_to_rgb(depth, dmax):
    import matplotlib

    return matplotlib.colormaps["viridis"](np.clip(depth / dmax, 0.0, 1.0))[..., :3]


def write_sample_outputs(out: Path, run, reference, canvas, warped, depth_max) -> None:
    """Binary arrays with sidecars, per-frame panels and a contact sheet."""
    from .worldgen import write_frames

    out.mkdir(parents=True, exist_ok=True)
    depth, video = run.depth[0], run.video[0]
    write_frames(out / "depth.bin", {"depth": depth[..., None]})
    write_frames(out / "video.bin", {"appearance": video})
    F = depth.shape[0]
    for t in range(F):
        panel = np.concatenate([
            reference, canvas[t], _depth_to_rgb(warped.depth[t], depth_max),
            _depth_to_rgb(depth[t], depth_max), video[t],
        ], axis=1)
        _save_png(out / f"frame_{t:03d}.png", panel)
    sheet = np.concatenate([
        np.concatenate([_depth_to_rgb(d, depth_max) for d in depth], axis=1),
        np.concatenate(list(video), axis=1),
    ], axis=0)
    _save_png(out / "contact_sheet.png", sheet)


def cmd_sample(args) -> int:
    import torch

    from .camera_warp import WarpedDepthSequence, warp_depth
    from .control import rasterize_points, read_control
    from .data import build_conditioning
    from .sampler import DepthEdit, edit_depth, load_pipeline, sample
    from .worldgen import read_poses

    cfg = _config(args)
    model, schedule, codec, _ = load_pipeline(args.checkpoint)
    mc = model.config
    poses = read_poses(args.poses)
    if len(poses) != mc.frames:
        raise SystemExit(f"model generates {mc.frames} frames, got {len(poses)} poses")
    reference, d0, v0 = _load_reference(args.ref)
    if reference.shape[:2] != (mc.height, mc.width):
        raise SystemExit(f"reference is {reference.shape[:2]}, model expects {(mc.height, mc.width)}")
    if args.depth is not None:
        d0, v0 = _load_depth0(args.depth)
    if d0 is None:
        log.warning("no first-frame depth given; camera conditioning left empty")
        shape = (mc.frames, mc.height, mc.width)
        warped = WarpedDepthSequence(np.zeros(shape), np.ones(shape, dtype=bool))
    else:
        warped = warp_depth(d0, v0, poses)
    tracks = read_control(args.control, mc.frames)
    canvas = rasterize_points(tracks, (mc.frames, mc.height, mc.width))
    cond = torch.from_numpy(build_conditioning(codec, reference, canvas, warped)[None])
    edit = None
    if args.edit is not None:
        edits = [DepthEdit.from_json(e) for e in json.loads(Path(args.edit).read_text())]
        edit = lambda z: edit_depth(z, edits, codec)
    steps = args.steps or cfg.sample.steps
    run = sample(model, schedule, codec, cond, steps=(steps, steps), seeds=(args.seed, args.seed + 1), edit=edit)
    out = Path(args.out)
    write_sample_outputs(out, run, reference, canvas, warped, mc.depth_max)
    (out / "audit.json").write_text(json.dumps(run.audit, indent=1))
    if not run.audit["passed"]:
        log.error("stage-isolation audit failed: %s", run.audit)
        return 1
    return 0


def cmd_eval(args) -> int:
    from itertools import islice

    from .evaluation import EvalScene, edit_removal_eval, evaluate, plot_report
    from .sampler import load_pipeline
    from .worldgen import read_dataset

    cfg = _config(args)
    model, schedule, codec, _ = load_pipeline(args.checkpoint)
    scenes = [EvalScene.from_scene(s) for s in islice(read_dataset(args.data), args.scenes)]
    steps = args.steps or cfg.sample.steps
    report = evaluate(model, schedule, codec, scenes, steps=steps, seed=args.seed)
    if args.edit_probe:
        probe = edit_removal_eval(model, schedule, codec, scenes, steps=steps, seed=args.seed)
        report.aggregate["edit_removed_fraction"] = probe["removed_fraction"]
        report.aggregate["edit_present_before_fraction"] = probe["present_before_fraction"]
        report.isolation_audit_passed &= probe["audit_passed"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json")
    plot_report(report, out / "metrics.png")
    for key, value in report.aggregate.items():
        log.info("%s: %s", key, value)
    if not report.isolation_audit_passed:
        log.error("stage-isolation audit failed")
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motionforcing", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help="random seed (default: per command)")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=2000)
    g.add_argument("--eval", action="store_true", help="evaluation split: no events, separated objects kept in view")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the dual-stream denoiser")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="two-stage generation from controls")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--control", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--ref", required=True, help="PNG or frames file (its depth is used for warping)")
    s.add_argument("--depth", default=None, help="first-frame depth (frames file or .npy)")
    s.add_argument("--out", required=True)
    s.add_argument("--edit", default=None, help="JSON list of depth edits applied between stages")
    s.add_argument("--steps", type=int, default=None)
    s.set_defaults(func=cmd_sample)

    w = sub.add_parser("warp", help="warp first-frame depth through camera poses")
    w.add_argument("--poses", required=True)
    w.add_argument("--depth", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--splat-value", choices=("source", "target"), default="target")
    w.set_defaults(func=cmd_warp)

    e = sub.add_parser("eval", help="desk-scale metrics on an evaluation split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--scenes", type=int, default=32)
    e.add_argument("--steps", type=int, default=None)
    e.add_argument("--edit-probe", action="store_true", help="also run the depth-deletion probe")
    e.set_defaults(func=cmd_eval)
    return p


DEFAULT_SEEDS = {"gen-data": 0, "sample": 0, "eval": 0, "warp": 0}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.seed is None and args.command in DEFAULT_SEEDS:
        args.seed = DEFAULT_SEEDS[args.command]
    return int(args.func(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
