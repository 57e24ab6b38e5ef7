"""Desk-scale metrics on synthetic scenes with analytic ground truth."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .control import PointTrackSet, rasterize_points
from .data import SceneArrays, build_conditioning, masked_conditioning
from .masking import MaskSpec
from .sampler import DepthEdit, Sampler, apply_depth_edits, sample
from .worldgen import Scene, render_background

REPORT_SCHEMA_VERSION = 1
COLOR_TOLERANCE = 0.1
# a detected blob must cover this fraction of the controlled disc area
MIN_AREA_FRACTION = 0.25


def blob_centroids(mask: np.ndarray, min_pixels: int = 3) -> list:
    """Centroids ``(x, y)`` and sizes of 8-connected components of ``mask``."""
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    sizes = ndimage.sum_labels(mask, labels, idx)
    centres = ndimage.center_of_mass(mask, labels, idx)
    return [((float(c[1]), float(c[0])), int(s)) for c, s in zip(centres, sizes) if s >= min_pixels]


def blob_floor(radius: float, fraction: float = MIN_AREA_FRACTION) -> int:
    """Smallest component size accepted for an object of ``radius`` px."""
    return max(3, int(np.ceil(fraction * np.pi * radius ** 2)))


def nearest_blob(mask: np.ndarray, point, exclude=(), min_pixels: int = 3):
    """Centroid of the component nearest ``point``; components nearer to any
    point in ``exclude`` than to ``point`` are skipped. ``None`` if none."""
    best, best_d = None, np.inf
    for (x, y), _ in blob_centroids(mask, min_pixels):
        d = np.hypot(x - point[0], y - point[1])
        if any(np.hypot(x - e[0], y - e[1]) < d for e in exclude):
            continue
        if d < best_d:
            best, best_d = (x, y), d
    return best


def color_mask(frame: np.ndarray, color, tol: float = COLOR_TOLERANCE) -> np.ndarray:
    return np.all(np.abs(frame - np.asarray(color)) <= tol, axis=-1)


def depth_foreground(depth: np.ndarray, background: np.ndarray, background_valid: np.ndarray,
                     rel_margin: float = 0.1, abs_margin: float = 0.5, min_depth: float = 2.0) -> np.ndarray:
    """Pixels clearly in front of the object-free background (or in front of sky)."""
    margin = np.maximum(abs_margin, rel_margin * background)
    in_front = background_valid & (depth < background - margin)
    over_sky = ~background_valid
    return (in_front | over_sky) & (depth > min_depth)


def _as_track_dict(tracks) -> dict:
    return tracks.tracks if isinstance(tracks, PointTrackSet) else dict(tracks)


def trajectory_adherence(masks_by_object: dict, tracks, exclude_others: bool = True) -> dict:
    """Mean pixel distance between detected blob and controlled centroid.

    ``masks_by_object[oid]`` is an ``(F, H, W)`` boolean detection mask for
    that object (colour match for video, foreground for depth). Components
    smaller than a quarter of the controlled disc area are ignored, so
    isolated speckle cannot stand in for the object. Frames where no blob is
    found score the image diagonal and are counted in ``missing``.
    """
    tracks = _as_track_dict(tracks)
    out = {}
    for oid, entries in tracks.items():
        masks = masks_by_object[oid]
        F, H, W = masks.shape
        diag = float(np.hypot(H, W))
        errs, missing = [], 0
        for t, e in enumerate(entries):
            if e is None:
                continue
            others = [tracks[o][t][:2] for o in tracks if o != oid and tracks[o][t] is not None] if exclude_others else []
            c = nearest_blob(masks[t], e[:2], exclude=others, min_pixels=blob_floor(e[2]))
            if c is None:
                errs.append(diag)
                missing += 1
            else:
                errs.append(float(np.hypot(c[0] - e[0], c[1] - e[1])))
        out[oid] = {"mean_px": float(np.mean(errs)) if errs else float("nan"),
                    "per_frame_px": errs, "missing": missing}
    return out


def video_masks(video: np.ndarray, colors: dict) -> dict:
    return {oid: np.stack([color_mask(f, c) for f in video]) for oid, c in colors.items()}


def depth_masks(depth: np.ndarray, background: np.ndarray, background_valid: np.ndarray, ids) -> dict:
    fg = depth_foreground(depth, background, background_valid)
    return {oid: fg for oid in ids}


def depth_mae(pred: np.ndarray, target: np.ndarray, valid: np.ndarray) -> float:
    return float(np.abs(pred - target)[valid].mean())


def depth_range(target: np.ndarray, valid: np.ndarray) -> float:
    return float(target[valid].max() - target[valid].min())


@dataclass
class EvalScene:
    """A rendered scene plus everything evaluation needs from it."""

    scene: Scene
    arrays: SceneArrays
    background: np.ndarray
    background_valid: np.ndarray
    colors: dict

    @classmethod
    def from_scene(cls, scene: Scene, splat_value: str = "target") -> "EvalScene":
        bg, bgv = render_background(scene.spec)
        return cls(scene, SceneArrays.from_scene(scene, splat_value), bg, bgv,
                   {o.id: np.asarray(o.color) for o in scene.spec.objects})

    def conditioning(self, codec, spec: MaskSpec | None = None) -> np.ndarray:
        return masked_conditioning(codec, self.arrays, spec or MaskSpec.identity(len(self.arrays.tracks.ids)))


@dataclass
class EvalReport:
    schema_version: int = REPORT_SCHEMA_VERSION
    scenes: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    isolation_audit_passed: bool = True

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def _stats(values) -> dict:
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=np.float64)
    if not len(v):
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(len(v))}


def generate_depth(model, schedule, codec, conds, steps: int, seed: int, batch_size: int = 16):
    """Stage-1 depth for a list of conditioning arrays; returns decoded depth and audit."""
    sampler = Sampler(model, schedule, codec)
    outs = []
    for i in range(0, len(conds), batch_size):
        cond = torch.from_numpy(np.stack(conds[i:i + batch_size]))
        outs.append(codec.decode_depth(sampler.stage1(cond, steps, seed).numpy()))
    return np.concatenate(outs), sampler.audit()


def evaluate_controllability(model, schedule, codec, scenes, steps: int = 16, seed: int = 0) -> dict:
    """Stage-1 adherence (px) and depth MAE with every control present."""
    conds = [s.conditioning(codec) for s in scenes]
    depth, audit = generate_depth(model, schedule, codec, conds, steps, seed)
    per_scene = []
    for s, d in zip(scenes, depth):
        gt_depth = s.arrays.depth
        valid = gt_depth > 0
        adh = trajectory_adherence(depth_masks(d, s.background, s.background_valid, s.arrays.tracks.ids),
                                   s.arrays.tracks)
        per_scene.append({
            "seed": s.scene.spec.seed,
            "adherence_px": float(np.mean([a["mean_px"] for a in adh.values()])) if adh else None,
            "adherence_by_object": {str(k): v["mean_px"] for k, v in adh.items()},
            "missing": int(sum(a["missing"] for a in adh.values())),
            "depth_mae": depth_mae(d, gt_depth, valid),
            "depth_range": depth_range(gt_depth, valid),
        })
        per_scene[-1]["depth_mae_rel"] = per_scene[-1]["depth_mae"] / per_scene[-1]["depth_range"]
    return {"per_scene": per_scene, "depth": depth, "audit": audit}


def _fully_visible(scene: EvalScene, oid) -> bool:
    return all(e is not None for e in scene.arrays.tracks.tracks[oid])


def masked_recovery_eval(model, schedule, codec, scenes, steps: int = 16, seed: int = 0,
                         truncate_ratio: float = 0.5, target_index: int = 0) -> dict:
    """Blob error for one object whose control is fully dropped, vs the same
    object with full control and with control truncated at ``truncate_ratio``.

    The reference trajectory is the analytic ground-truth track.
    """
    rows, conds_full, conds_drop, conds_trunc = [], [], [], []
    for s in scenes:
        ids = s.arrays.tracks.ids
        candidates = [o for o in ids if _fully_visible(s, o)]
        if not candidates:
            continue
        target = candidates[target_index % len(candidates)]
        drops = tuple(o == target for o in ids)
        conds_full.append(s.conditioning(codec))
        conds_drop.append(s.conditioning(codec, MaskSpec(1.0, 1.0, drops, 1.0)))
        # truncation touches the target only
        rows.append((s, target))
        trunc_tracks = s.arrays.tracks.copy()
        T = s.arrays.shape[0] - 1
        cut = MaskSpec(1.0, truncate_ratio, (), 0.0).obj_cutoff(T)
        trunc_tracks.tracks[target] = [e if t <= cut else None for t, e in enumerate(trunc_tracks.tracks[target])]
        canvas = rasterize_points(trunc_tracks, s.arrays.shape)
        conds_trunc.append(build_conditioning(codec, s.arrays.appearance[0], canvas, s.arrays.warped))
    if not rows:
        return {"per_scene": [], "final_masked_px": float("nan"), "final_unmasked_px": float("nan")}
    d_full, _ = generate_depth(model, schedule, codec, conds_full, steps, seed)
    d_drop, _ = generate_depth(model, schedule, codec, conds_drop, steps, seed)
    d_trunc, _ = generate_depth(model, schedule, codec, conds_trunc, steps, seed)
    per_scene = []
    for (s, target), df, dd, dt in zip(rows, d_full, d_drop, d_trunc):
        gt = {target: s.arrays.tracks.tracks[target]}
        others = {o: e for o, e in s.arrays.tracks.tracks.items() if o != target}
        T = s.arrays.shape[0] - 1
        cut = MaskSpec(1.0, truncate_ratio, (), 0.0).obj_cutoff(T)

        def errors(depth):
            fg = depth_foreground(depth, s.background, s.background_valid)
            errs, missing = [], 0
            for t, e in enumerate(gt[target]):
                ex = [v[t][:2] for v in others.values() if v[t] is not None]
                c = nearest_blob(fg[t], e[:2], exclude=ex, min_pixels=blob_floor(e[2]))
                if c is None:
                    errs.append(float(np.hypot(*fg.shape[1:])))
                    missing += 1
                else:
                    errs.append(float(np.hypot(c[0] - e[0], c[1] - e[1])))
            return errs, missing

        e_full, m_full = errors(df)
        e_drop, m_drop = errors(dd)
        e_trunc, _ = errors(dt)
        per_scene.append({
            "seed": s.scene.spec.seed,
            "target": int(target),
            "unmasked_px": e_full,
            "masked_px": e_drop,
            "truncated_px": e_trunc,
            "masked_missing": m_drop,
            "final_unmasked_px": e_full[-1],
            "final_masked_px": e_drop[-1],
            "post_cutoff_truncated_px": float(np.mean(e_trunc[cut + 1:])),
            "post_cutoff_masked_px": float(np.mean(e_drop[cut + 1:])),
        })
    agg = lambda k: float(np.mean([r[k] for r in per_scene]))
    return {
        "per_scene": per_scene,
        "final_masked_px": agg("final_masked_px"),
        "final_unmasked_px": agg("final_unmasked_px"),
        "post_cutoff_truncated_px": agg("post_cutoff_truncated_px"),
        "post_cutoff_masked_px": agg("post_cutoff_masked_px"),
        "masked_per_frame_px": np.mean([r["masked_px"] for r in per_scene], axis=0).tolist(),
    }


def object_present(video_frame: np.ndarray, color, near, radius: float,
                   min_fraction: float = MIN_AREA_FRACTION) -> bool:
    """Whether a blob of ``color`` covers at least ``min_fraction`` of the
    expected disc area within ``2 * radius`` of ``near``."""
    H, W = video_frame.shape[:2]
    v, u = np.mgrid[0:H, 0:W]
    window = (u - near[0]) ** 2 + (v - near[1]) ** 2 <= (2 * radius) ** 2
    hits = color_mask(video_frame, color) & window
    return hits.sum() >= blob_floor(radius, min_fraction)


def edit_removal_eval(model, schedule, codec, scenes, steps: int = 16, seed: int = 0,
                      drop_control: bool = False) -> dict:
    """Delete one object's depth blob in frames 1..T and re-render.

    An edited frame counts as removed when the object's colour no longer
    forms a disc-sized blob near its ground-truth position. ``removed_fraction``
    is taken over frames where the unedited render did show the object.
    """
    results = []
    for s in scenes:
        ids = s.arrays.tracks.ids
        candidates = [o for o in ids if _fully_visible(s, o)]
        if not candidates:
            continue
        target = candidates[0]
        F = s.arrays.shape[0]
        spec = MaskSpec(1.0, 1.0, tuple(o == target for o in ids), 1.0) if drop_control else None
        cond = torch.from_numpy(s.conditioning(codec)[None])
        cond_edit = torch.from_numpy(s.conditioning(codec, spec)[None]) if drop_control else cond
        sampler = Sampler(model, schedule, codec)
        z_d = sampler.stage1(cond, steps, seed)
        depth = codec.decode_depth(z_d.numpy())[0]
        fg = depth_foreground(depth, s.background, s.background_valid)
        H, W = depth.shape[1:]
        v, u = np.mgrid[0:H, 0:W]
        region = np.zeros((F, H, W), dtype=bool)
        for t, (x, y, r) in enumerate(s.arrays.tracks.tracks[target]):
            region[t] = fg[t] & ((u - x) ** 2 + (v - y) ** 2 <= (r + 2.0) ** 2)
        edits = [DepthEdit("delete", tuple(range(1, F)), mask=region, background=s.background)]
        edited = apply_depth_edits(depth, edits)
        z_edit = torch.from_numpy(codec.encode_depth(edited[None]).astype(np.float32))
        z_v_plain = sampler.stage2(z_d, cond, steps, seed + 1)
        z_v_edit = sampler.stage2(z_edit, cond_edit, steps, seed + 1)
        v_plain = np.clip(codec.decode_video(z_v_plain.numpy())[0], 0, 1)
        v_edit = np.clip(codec.decode_video(z_v_edit.numpy())[0], 0, 1)
        color = s.colors[target]
        removed, present_before = [], []
        for t in range(1, F):
            x, y, r = s.arrays.tracks.tracks[target][t]
            present_before.append(object_present(v_plain[t], color, (x, y), r))
            removed.append(not object_present(v_edit[t], color, (x, y), r))
        results.append({
            "seed": s.scene.spec.seed, "target": int(target),
            "removed": removed, "present_before": present_before,
            "audit": sampler.audit(),
        })
    removed = np.array([x for r in results for x in r["removed"]], dtype=bool)
    before = np.array([x for r in results for x in r["present_before"]], dtype=bool)
    nan = float("nan")
    return {
        "per_scene": results,
        # only frames where the unedited render shows the object can demonstrate a removal
        "removed_fraction": float(removed[before].mean()) if before.any() else nan,
        "removed_fraction_all": float(removed.mean()) if len(removed) else nan,
        "present_before_fraction": float(before.mean()) if len(before) else nan,
        "audit_passed": all(r["audit"]["passed"] for r in results),
    }


def evaluate(model, schedule, codec, scenes, steps: int = 16, seed: int = 0) -> EvalReport:
    """Controllability, depth accuracy, masked recovery and stage-isolation audit."""
    ctrl = evaluate_controllability(model, schedule, codec, scenes, steps, seed)
    rec = masked_recovery_eval(model, schedule, codec, scenes, steps, seed)
    # one full two-stage run for the isolation audit
    cond = torch.from_numpy(np.stack([scenes[0].conditioning(codec)]))
    run = sample(model, schedule, codec, cond, steps=(steps, steps), seeds=(seed, seed + 1))
    audit_ok = bool(ctrl["audit"]["passed"] and run.audit["passed"])
    per_scene = ctrl["per_scene"]
    rec_by_seed = {r["seed"]: r for r in rec["per_scene"]}
    for row in per_scene:
        r = rec_by_seed.get(row["seed"])
        if r is not None:
            row["masked_recovery_final_px"] = r["final_masked_px"]
            row["unmasked_final_px"] = r["final_unmasked_px"]
    aggregate = {
        "adherence_px": _stats([r["adherence_px"] for r in per_scene]),
        "depth_mae": _stats([r["depth_mae"] for r in per_scene]),
        "depth_mae_rel": _stats([r["depth_mae_rel"] for r in per_scene]),
        "masked_recovery_final_px": _stats([r["final_masked_px"] for r in rec["per_scene"]]),
        "unmasked_final_px": _stats([r["final_unmasked_px"] for r in rec["per_scene"]]),
        "truncated_post_cutoff_px": _stats([r["post_cutoff_truncated_px"] for r in rec["per_scene"]]),
        "masked_post_cutoff_px": _stats([r["post_cutoff_masked_px"] for r in rec["per_scene"]]),
    }
    return EvalReport(scenes=per_scene, aggregate=aggregate, isolation_audit_passed=audit_ok)


def plot_report(report: EvalReport, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    keys = ["adherence_px", "unmasked_final_px", "masked_recovery_final_px",
            "truncated_post_cutoff_px", "masked_post_cutoff_px"]
    means = [report.aggregate[k]["mean"] for k in keys]
    stds = [report.aggregate[k]["std"] for k in keys]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4), gridspec_kw={"width_ratios": [4, 1]})
    ax1.bar(range(len(keys)), means, yerr=stds, color="tab:blue", alpha=0.8)
    ax1.set_xticks(range(len(keys)), [k.replace("_", "\n") for k in keys], fontsize=7)
    ax1.set_ylabel("pixels")
    ax2.bar([0], [report.aggregate["depth_mae_rel"]["mean"]], yerr=[report.aggregate["depth_mae_rel"]["std"]],
            color="tab:orange")
    ax2.set_xticks([0], ["depth MAE\n/ range"], fontsize=7)
    fig.suptitle(f"isolation audit: {'pass' if report.isolation_audit_passed else 'FAIL'}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
