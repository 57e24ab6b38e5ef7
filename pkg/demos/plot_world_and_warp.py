"""
A synthetic scene and its camera-warped depth
=============================================

Render one random scene, then push the first frame's depth through every
camera pose. Holes show where the moving camera sees something the first
frame never did.
"""
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from motionforcing import random_scene_spec, generate_scene, warp_depth
from motionforcing.worldgen import Scene

spec = random_scene_spec(7, camera_speed=(0.3, 0.4))
scene = Scene(spec, generate_scene(spec))
appearance, depth, valid = scene.stack()
print(f"{len(spec.objects)} objects, {appearance.shape[0]} frames of {spec.height}x{spec.width}")

warped = warp_depth(depth[0], valid[0], spec.poses)
print("hole fraction per frame:", np.round(warped.holes.mean(axis=(1, 2)), 3))

# top row: video, middle: true depth, bottom: warped first-frame depth
frames = [0, 4, 8]
fig, axes = plt.subplots(3, len(frames), figsize=(7, 7))
for col, t in enumerate(frames):
    axes[0, col].imshow(appearance[t])
    axes[0, col].set_title(f"t = {t}")
    axes[1, col].imshow(depth[t], vmin=0, vmax=30)
    axes[2, col].imshow(np.ma.masked_where(warped.holes[t], warped.depth[t]), vmin=0, vmax=30)
for ax in axes.flat:
    ax.axis("off")
fig.tight_layout()
fig.savefig("world_and_warp.png", dpi=100)
