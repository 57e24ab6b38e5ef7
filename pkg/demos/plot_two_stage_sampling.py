"""
Depth first, then video, then an edit
=====================================

Load the trained toy checkpoint, generate depth from the point controls of an
evaluation scene, render video from that depth, and finally erase one object
from the depth before rendering again.

Run from the repository root; the checkpoint defaults to
``artifacts/toy_checkpoint.pt``. The scene is the first one of the evaluation
split (``gen-data --eval --seed 100000``), rebuilt from its seed.
"""
import sys
from dataclasses import replace

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from motionforcing import generate_scene, load_pipeline, random_scene_spec
from motionforcing.cli import EVAL_WORLD
from motionforcing.evaluation import EvalScene, depth_foreground
from motionforcing.sampler import DepthEdit, Sampler, apply_depth_edits
from motionforcing.worldgen import Scene, WorldConfig

ckpt = sys.argv[1] if len(sys.argv) > 1 else "artifacts/toy_checkpoint.pt"
model, schedule, codec, _ = load_pipeline(ckpt)
spec = random_scene_spec(100000, replace(WorldConfig(), **EVAL_WORLD))
scene = EvalScene.from_scene(Scene(spec, generate_scene(spec)))

cond = torch.from_numpy(scene.conditioning(codec)[None])
sampler = Sampler(model, schedule, codec)
z_depth = sampler.stage1(cond, 25, seed=0)
depth = codec.decode_depth(z_depth.numpy())[0]
video = np.clip(codec.decode_video(sampler.stage2(z_depth, cond, 25, seed=1).numpy())[0], 0, 1)

# cut the first object out of the generated depth, frames 1..8
target = scene.arrays.tracks.ids[0]
fg = depth_foreground(depth, scene.background, scene.background_valid)
v, u = np.mgrid[0:depth.shape[1], 0:depth.shape[2]]
region = np.zeros(depth.shape, dtype=bool)
for t, entry in enumerate(scene.arrays.tracks.tracks[target]):
    if entry is not None:
        x, y, r = entry
        region[t] = fg[t] & ((u - x) ** 2 + (v - y) ** 2 <= (r + 2) ** 2)
edited = apply_depth_edits(depth, [DepthEdit("delete", tuple(range(1, 9)), mask=region,
                                             background=scene.background)])
z_edit = torch.from_numpy(codec.encode_depth(edited[None]).astype(np.float32))
video_edit = np.clip(codec.decode_video(sampler.stage2(z_edit, cond, 25, seed=1).numpy())[0], 0, 1)
print("audit:", sampler.audit())

rows = [("truth", scene.arrays.appearance), ("depth", depth), ("video", video),
        ("edited depth", edited), ("re-rendered", video_edit)]
fig, axes = plt.subplots(len(rows), 5, figsize=(9, 9))
for r, (label, seq) in enumerate(rows):
    for c, t in enumerate(range(0, 9, 2)):
        img = seq[t]
        axes[r, c].imshow(img, vmin=0, vmax=codec.depth_max) if img.ndim == 2 else axes[r, c].imshow(img)
        axes[r, c].set_xticks([])
        axes[r, c].set_yticks([])
    axes[r, 0].set_ylabel(label)
fig.tight_layout()
fig.savefig("two_stage_sampling.png", dpi=100)
