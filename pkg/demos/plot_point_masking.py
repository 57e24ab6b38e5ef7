"""
Point controls and how training hides them
==========================================

Each object is summarised per frame by a centroid and a radius. During
training the controls are cut short in time, and whole objects are dropped,
so the model has to carry motion forward on its own.
"""
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from motionforcing import PointTrackSet, rasterize_points, random_scene_spec, generate_scene
from motionforcing.masking import MaskSpec, apply_object_masks
from motionforcing.worldgen import Scene

spec = random_scene_spec(11, min_objects=3, max_objects=3)
scene = Scene(spec, generate_scene(spec))
tracks = PointTrackSet.from_scene(scene)
shape = (len(scene.frames), spec.height, spec.width)

for oid in tracks.ids:
    first, last = tracks.tracks[oid][0], tracks.tracks[oid][-1]
    print(f"object {oid}: {first} -> {last}")

full = rasterize_points(tracks, shape)
# keep controls up to 40% of the clip, and drop the first object entirely
spec_mask = MaskSpec(1.0, 0.4, (True, False, False), 0.3)
masked = rasterize_points(apply_object_masks(tracks, spec_mask), shape)

fig, axes = plt.subplots(2, 5, figsize=(10, 4.2))
for col, t in enumerate(range(0, 9, 2)):
    axes[0, col].imshow(full[t])
    axes[1, col].imshow(masked[t])
    axes[0, col].set_title(f"t = {t}")
axes[0, 0].set_ylabel("all controls")
axes[1, 0].set_ylabel("masked")
for ax in axes.flat:
    ax.set_xticks([])
    ax.set_yticks([])
fig.tight_layout()
fig.savefig("point_masking.png", dpi=100)
