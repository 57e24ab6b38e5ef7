"""Sparse point controls: per-object discs on a black canvas."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _build_palette(n: int = 64) -> np.ndarray:
    levels = np.linspace(0.0, 1.0, 8)
    grid = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), -1).reshape(-1, 3)
    grid = grid[grid.sum(1) >= 0.5]  # keep clear of the black background
    chosen = [int(np.argmin(np.abs(grid - [1.0, 0.0, 0.0]).sum(1)))]
    dist = np.linalg.norm(grid - grid[chosen[0]], axis=1)
    while len(chosen) < n:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(grid - grid[nxt], axis=1))
    return grid[chosen].astype(np.float32)


PALETTE = _build_palette()
PALETTE.setflags(write=False)


def color(object_id: int) -> np.ndarray:
    """Identity colour of an object; injective over ids 0..63."""
    return PALETTE[(int(object_id) * 37) % len(PALETTE)]


@dataclass
class PointTrackSet:
    """Per-object ``(x, y, r)`` entries, ``None`` where absent."""

    frames: int
    tracks: dict = field(default_factory=dict)

    def __post_init__(self):
        for oid, entries in self.tracks.items():
            if len(entries) != self.frames:
                raise ValueError(f"object {oid}: expected {self.frames} entries, got {len(entries)}")
            for e in entries:
                if e is not None and not e[2] > 0:
                    raise ValueError(f"object {oid}: radius must be positive, got {e[2]}")

    @classmethod
    def from_items(cls, frames: int, items) -> "PointTrackSet":
        tracks = {}
        for oid, entries in items:
            oid = int(oid)
            if oid in tracks:
                raise ValueError(f"duplicate object id {oid}")
            tracks[oid] = [None if e is None else tuple(float(x) for x in e) for e in entries]
        return cls(frames, tracks)

    @classmethod
    def from_scene(cls, scene) -> "PointTrackSet":
        ids = [o.id for o in scene.spec.objects]
        return cls.from_items(len(scene.frames), [(i, [f.tracks.get(i) for f in scene.frames]) for i in ids])

    @property
    def ids(self) -> list:
        return list(self.tracks)

    def without(self, object_id: int) -> "PointTrackSet":
        return PointTrackSet(self.frames, {k: v for k, v in self.tracks.items() if k != object_id})

    def copy(self) -> "PointTrackSet":
        return PointTrackSet(self.frames, {k: list(v) for k, v in self.tracks.items()})

    def to_json(self) -> list:
        return [{"id": k, "frames": [None if e is None else list(e) for e in v]} for k, v in self.tracks.items()]


def rasterize_points(tracks: PointTrackSet, shape) -> np.ndarray:
    """Draw every present entry as a filled disc in its identity colour.

    Discs are hard-edged: pixel centre ``(u, v)`` is covered when
    ``(u - x)**2 + (v - y)**2 <= r**2``. Smaller discs are drawn on top.
    """
    F, H, W = shape
    if tracks.frames != F:
        raise ValueError(f"track set has {tracks.frames} frames, canvas has {F}")
    canvas = np.zeros((F, H, W, 3), dtype=np.float32)
    v, u = np.mgrid[0:H, 0:W]
    for t in range(F):
        entries = [(e[2], oid, e) for oid, seq in tracks.tracks.items() if (e := seq[t]) is not None]
        for r, oid, (x, y, _) in sorted(entries, key=lambda item: (-item[0], item[1])):
            if not r > 0:
                raise ValueError(f"object {oid}: radius must be positive, got {r}")
            x0, x1 = max(int(np.floor(x - r)), 0), min(int(np.ceil(x + r)) + 1, W)
            y0, y1 = max(int(np.floor(y - r)), 0), min(int(np.ceil(y + r)) + 1, H)
            if x0 >= x1 or y0 >= y1:
                continue
            uu, vv = u[y0:y1, x0:x1], v[y0:y1, x0:x1]
            disc = (uu - x) ** 2 + (vv - y) ** 2 <= r * r
            canvas[t, y0:y1, x0:x1][disc] = color(oid)
    return canvas


def interpolate_track(keypoints, frames: int) -> list:
    """Piecewise-linear ``(x, y, r)`` between keypoints ``(frame, x, y, r)``.

    Values before the first and after the last keypoint are held constant.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.ndim != 2 or kp.shape[1] != 4 or len(kp) < 2:
        raise ValueError("need at least two (frame, x, y, r) keypoints")
    f = kp[:, 0]
    if np.any(f != np.round(f)):
        raise ValueError("keypoint frames must be integers")
    if np.any(f < 0) or np.any(f > frames - 1):
        raise ValueError(f"keypoint frame out of range [0, {frames - 1}]")
    if len(np.unique(f)) != len(f):
        raise ValueError("duplicate keypoint frame")
    if np.any(np.diff(f) <= 0):
        raise ValueError("keypoint frames must be strictly increasing")
    t = np.arange(frames, dtype=np.float64)
    cols = [np.interp(t, f, kp[:, k]) for k in (1, 2, 3)]
    return [(float(x), float(y), float(r)) for x, y, r in zip(*cols)]


def modulate_velocity(track, scale) -> list:
    """Scale each per-frame displacement of ``track`` and re-accumulate from frame 0.

    A zero factor holds the object still for that step.
    """
    pts = np.asarray(track, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if pts.ndim != 2 or np.isnan(pts).any():
        raise ValueError("track must be present at every frame")
    if scale.shape != (len(pts) - 1,):
        raise ValueError(f"expected {len(pts) - 1} scale factors, got {scale.shape}")
    if np.any(scale < 0) or not np.all(np.isfinite(scale)):
        raise ValueError("scale factors must be finite and non-negative")
    steps = np.diff(pts, axis=0) * scale[:, None]
    out = np.concatenate([pts[:1], pts[:1] + np.cumsum(steps, axis=0)])
    if np.any(out[:, 2] <= 0):
        raise ValueError("modulated radius became non-positive")
    return [tuple(float(x) for x in row) for row in out]


def read_control(path, frames: int) -> PointTrackSet:
    """Load ``control.json``: ``[{"id": 0, "keypoints": [[frame, x, y, r], ...]}, ...]``."""
    objs = json.loads(Path(path).read_text())
    return PointTrackSet.from_items(
        frames, [(o["id"], interpolate_track(o["keypoints"], frames)) for o in objs]
    )


def write_control(path, keypoints_by_id: dict) -> None:
    Path(path).write_text(json.dumps(
        [{"id": int(k), "keypoints": [list(map(float, kp)) for kp in v]} for k, v in keypoints_by_id.items()],
        indent=1,
    ))
