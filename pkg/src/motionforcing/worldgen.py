"""Procedural 2.5-D world: camera-facing discs moving over a checkered ground.

Every rendered quantity has a closed form. A disc of physical radius ``rho``
whose centre sits at camera-frame depth ``z`` always faces the camera, so it
projects to a circle of radius ``f * rho / z`` with constant depth ``z``.

Moving discs leave a one-frame motion smear in the appearance (the path swept
over the preceding frame interval, blended at half intensity). The smear is not
a surface and never enters the depth map.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera_warp import NEAR_CLIP, CameraPose, intrinsics

SKY_COLOR = (0.55, 0.70, 0.90)
GROUND_COLORS = ((0.42, 0.42, 0.40), (0.52, 0.52, 0.50))
OBJECT_COLORS = (
    (0.90, 0.15, 0.15),
    (0.15, 0.75, 0.20),
    (0.20, 0.30, 0.95),
    (0.95, 0.85, 0.10),
    (0.90, 0.20, 0.85),
    (0.10, 0.85, 0.85),
    (0.98, 0.55, 0.10),
    (0.05, 0.05, 0.05),
)
SMEAR_SUBSTEPS = 4
DATASET_VERSION = 1


class InvalidKinematicsError(ValueError):
    """An object reaches or crosses the camera plane."""


class DatasetFormatError(ValueError):
    pass


class ChecksumError(DatasetFormatError):
    pass


@dataclass
class ObjectSpec:
    id: int
    position: tuple  # world units, at frame 0
    velocity: tuple  # world units / frame
    radius: float  # physical radius, world units
    color: tuple = OBJECT_COLORS[0]


@dataclass
class Event:
    """Scripted velocity change taking effect at ``frame``.

    ``stop`` zeroes the velocity of ``objects``; ``turn`` sets it to
    ``velocity``; ``swap`` exchanges the velocities of the two listed objects
    (an elastic collision between equal masses).
    """

    kind: str
    frame: int
    objects: tuple
    velocity: tuple | None = None


@dataclass
class SceneSpec:
    seed: int
    frames: int
    height: int
    width: int
    objects: list
    poses: list
    events: list = field(default_factory=list)
    ground_height: float = 1.5
    far_clip: float = 40.0
    motion_smear: bool = True

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("a scene needs at least 2 frames")
        if len(self.poses) != self.frames:
            raise ValueError(f"expected {self.frames} poses, got {len(self.poses)}")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        for ev in self.events:
            if ev.kind not in ("stop", "turn", "swap"):
                raise ValueError(f"unknown event kind {ev.kind!r}")
            if not 0 <= ev.frame < self.frames:
                raise ValueError(f"event frame {ev.frame} out of range")
            if ev.kind == "swap" and len(ev.objects) != 2:
                raise ValueError("swap events need exactly two objects")
            if ev.kind == "turn" and ev.velocity is None:
                raise ValueError("turn events need a velocity")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "frames": self.frames,
            "height": self.height,
            "width": self.width,
            "objects": [
                {**asdict(o), "position": list(map(float, o.position)),
                 "velocity": list(map(float, o.velocity)), "color": list(map(float, o.color))}
                for o in self.objects
            ],
            "poses": [p.to_json() for p in self.poses],
            "events": [
                {"kind": e.kind, "frame": e.frame, "objects": list(e.objects),
                 "velocity": None if e.velocity is None else list(map(float, e.velocity))}
                for e in self.events
            ],
            "ground_height": self.ground_height,
            "far_clip": self.far_clip,
            "motion_smear": self.motion_smear,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSpec":
        return cls(
            seed=obj["seed"],
            frames=obj["frames"],
            height=obj["height"],
            width=obj["width"],
            objects=[
                ObjectSpec(o["id"], tuple(o["position"]), tuple(o["velocity"]), o["radius"], tuple(o["color"]))
                for o in obj["objects"]
            ],
            poses=[CameraPose.from_json(p) for p in obj["poses"]],
            events=[
                Event(e["kind"], e["frame"], tuple(e["objects"]),
                      None if e["velocity"] is None else tuple(e["velocity"]))
                for e in obj["events"]
            ],
            ground_height=obj["ground_height"],
            far_clip=obj["far_clip"],
            motion_smear=obj["motion_smear"],
        )


@dataclass
class FrameBundle:
    appearance: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), 0.0 where nothing is hit
    validity: np.ndarray  # (H, W) bool
    tracks: dict  # object id -> (x, y, r) in pixels, or None when invisible
    pose: CameraPose


@dataclass
class Scene:
    spec: SceneSpec
    frames: list

    def stack(self):
        """Arrays ``(appearance, depth, validity)`` stacked over frames."""
        return (
            np.stack([f.appearance for f in self.frames]),
            np.stack([f.depth for f in self.frames]),
            np.stack([f.validity for f in self.frames]),
        )

    def track_array(self) -> tuple[list, np.ndarray]:
        """Object ids and an ``(N, F, 3)`` array with NaN for invisible frames."""
        ids = [o.id for o in self.spec.objects]
        arr = np.full((len(ids), len(self.frames), 3), np.nan)
        for t, fr in enumerate(self.frames):
            for i, oid in enumerate(ids):
                if fr.tracks.get(oid) is not None:
                    arr[i, t] = fr.tracks[oid]
        return ids, arr


def velocity_schedule(spec: SceneSpec) -> dict:
    """Per object, the list of ``(start_frame, velocity)`` segments."""
    current = {o.id: np.asarray(o.velocity, dtype=np.float64) for o in spec.objects}
    sched = {oid: [(float("-inf"), v.copy())] for oid, v in current.items()}
    for ev in sorted(spec.events, key=lambda e: e.frame):
        if ev.kind == "stop":
            updates = {oid: np.zeros(3) for oid in ev.objects}
        elif ev.kind == "turn":
            updates = {oid: np.asarray(ev.velocity, dtype=np.float64) for oid in ev.objects}
        else:
            a, b = ev.objects
            updates = {a: current[b].copy(), b: current[a].copy()}
        for oid, v in updates.items():
            if oid not in current:
                raise ValueError(f"event refers to unknown object {oid}")
            current[oid] = v
            sched[oid].append((float(ev.frame), v.copy()))
    return sched


def object_position(obj: ObjectSpec, schedule, s: float) -> np.ndarray:
    """World position at (possibly fractional or negative) time ``s``."""
    p = np.asarray(obj.position, dtype=np.float64).copy()
    segments = schedule[obj.id]
    if s < 0:
        return p + segments[0][1] * s
    for k, (start, v) in enumerate(segments):
        lo = max(start, 0.0)
        hi = segments[k + 1][0] if k + 1 < len(segments) else float("inf")
        if s <= lo:
            break
        p = p + v * (min(s, hi) - lo)
    return p


def _pixel_grid(height, width):
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u, v


def render_ground(pose: CameraPose, height, width, ground_height, far_clip):
    """Depth, validity and colour of the ground plane ``y = ground_height``."""
    u, v = _pixel_grid(height, width)
    Ki = pose.K_inv
    rays = np.stack([
        Ki[0, 0] * u + Ki[0, 1] * v + Ki[0, 2],
        Ki[1, 0] * u + Ki[1, 1] * v + Ki[1, 2],
        np.ones_like(u),
    ], axis=-1)
    dirs = rays @ pose.R  # R^T applied to each ray: world direction
    c = pose.center
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (ground_height - c[1]) / dirs[..., 1]
    valid = (dirs[..., 1] > 0) & (s > NEAR_CLIP) & (s <= far_clip)
    depth = np.where(valid, s, 0.0)
    with np.errstate(invalid="ignore"):
        hit = c + s[..., None] * dirs
        checker = (np.floor(hit[..., 0] / 2.0) + np.floor(hit[..., 2] / 2.0)) % 2
    checker = np.where(valid, checker, 0).astype(int)
    color = np.asarray(GROUND_COLORS)[checker]
    color[~valid] = SKY_COLOR
    return depth, valid, color


def camera_frame_position(p_world, pose: CameraPose) -> np.ndarray:
    return pose.R @ p_world + pose.t


def disc_projection(p_world, radius, pose: CameraPose):
    """Image centre ``(x, y)``, pixel radius and depth of a camera-facing disc."""
    pc = camera_frame_position(p_world, pose)
    z = pc[2]
    K = pose.K
    x = K[0, 0] * pc[0] / z + K[0, 1] * pc[1] / z + K[0, 2]
    y = K[1, 1] * pc[1] / z + K[1, 2]
    return x, y, K[0, 0] * radius / z, z


def check_kinematics(spec: SceneSpec) -> None:
    sched = velocity_schedule(spec)
    for t, pose in enumerate(spec.poses):
        for obj in spec.objects:
            z = camera_frame_position(object_position(obj, sched, t), pose)[2]
            if z <= NEAR_CLIP:
                raise InvalidKinematicsError(
                    f"object {obj.id} has camera depth {z:.4g} at frame {t}"
                )


def generate_scene(spec: SceneSpec) -> list:
    """Render ``spec.frames`` FrameBundles. Pure function of ``spec``."""
    for pose in spec.poses:
        K = pose.K
        if K[0, 0] != K[1, 1] or K[0, 1] != 0:
            raise ValueError("the renderer requires square pixels and zero skew")
    check_kinematics(spec)
    sched = velocity_schedule(spec)
    H, W = spec.height, spec.width
    u, v = _pixel_grid(H, W)
    out = []
    for t, pose in enumerate(spec.poses):
        depth, valid, color = render_ground(pose, H, W, spec.ground_height, spec.far_clip)
        owner = np.full((H, W), -1)
        tracks = {}
        projected = []
        for k, obj in enumerate(spec.objects):
            x, y, r, z = disc_projection(object_position(obj, sched, t), obj.radius, pose)
            projected.append((x, y, r, z))
            inside = (u - x) ** 2 + (v - y) ** 2 <= r * r
            nearer = inside & (~valid | (z < depth))
            depth[nearer] = z
            valid[nearer] = True
            color[nearer] = obj.color
            owner[nearer] = k
            visible = 0.0 <= x <= W - 1 and 0.0 <= y <= H - 1
            tracks[obj.id] = (float(x), float(y), float(r)) if visible else None
        if spec.motion_smear:
            base = color.copy()
            for k, obj in enumerate(spec.objects):
                smear = np.zeros((H, W), dtype=bool)
                for j in range(1, SMEAR_SUBSTEPS + 1):
                    s = t - j / SMEAR_SUBSTEPS
                    pc = camera_frame_position(object_position(obj, sched, s), pose)
                    if pc[2] <= NEAR_CLIP:
                        continue
                    x, y, r, z = disc_projection(object_position(obj, sched, s), obj.radius, pose)
                    disc = (u - x) ** 2 + (v - y) ** 2 <= r * r
                    smear |= disc & (~valid | (z < depth))
                smear &= owner != k
                color[smear] = 0.5 * base[smear] + 0.5 * np.asarray(obj.color)
        out.append(FrameBundle(
            appearance=np.clip(color, 0.0, 1.0).astype(np.float32),
            depth=depth.astype(np.float32),
            validity=valid,
            tracks=tracks,
            pose=pose,
        ))
    return out


def render_background(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Object-free depth and validity for every frame of ``spec``."""
    depths, valids = [], []
    for pose in spec.poses:
        d, m, _ = render_ground(pose, spec.height, spec.width, spec.ground_height, spec.far_clip)
        depths.append(d)
        valids.append(m)
    return np.stack(depths), np.stack(valids)


def camera_path(frames, *, focal, cx, cy, speed=0.0, yaw_rate=0.0, pitch=0.12, yaw0=0.0):
    """Forward-moving camera at the world origin height, optionally turning."""
    K = intrinsics(focal, cx, cy)
    cp, sp = np.cos(pitch), np.sin(pitch)
    R_pitch = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    poses = []
    c = np.zeros(3)
    for t in range(frames):
        yaw = yaw0 + yaw_rate * t
        right = np.array([np.cos(yaw), 0.0, -np.sin(yaw)])
        down = np.array([0.0, 1.0, 0.0])
        fwd = np.array([np.sin(yaw), 0.0, np.cos(yaw)])
        R = R_pitch @ np.stack([right, down, fwd])
        poses.append(CameraPose(R=R, t=-R @ c, K=K))
        c = c + speed * fwd
    return poses


@dataclass
class WorldConfig:
    """Sampling ranges for :func:`random_scene_spec`."""

    frames: int = 9
    height: int = 64
    width: int = 64
    focal_ratio: float = 0.9
    min_objects: int = 1
    max_objects: int = 3
    depth_range: tuple = (5.0, 13.0)
    radius_range: tuple = (0.7, 1.3)
    lateral_speed: float = 0.35
    depth_speed: float = 0.4
    camera_speed: tuple = (0.0, 0.4)
    yaw_rate: float = 0.03
    pitch: float = 0.12
    min_object_depth: float = 3.5
    event_prob: float = 0.1
    min_separation: float = 0.0  # pixels between disc rims at every frame
    inside_margin: float | None = None  # keep whole discs this far inside the image
    ground_height: float = 1.5
    far_clip: float = 40.0


def random_scene_spec(seed: int, config: WorldConfig | None = None, **overrides) -> SceneSpec:
    """Sample a valid scene; identical ``seed`` and config give identical specs."""
    cfg = config or WorldConfig()
    if overrides:
        cfg = WorldConfig(**{**asdict(cfg), **overrides})
    rng = np.random.default_rng(seed)
    H, W, F = cfg.height, cfg.width, cfg.frames
    focal = cfg.focal_ratio * W
    cx, cy = W / 2.0, H / 2.0
    for _ in range(1000):
        poses = camera_path(
            F, focal=focal, cx=cx, cy=cy,
            speed=rng.uniform(*cfg.camera_speed),
            yaw_rate=rng.uniform(-cfg.yaw_rate, cfg.yaw_rate),
            pitch=cfg.pitch,
        )
        n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        colors = rng.permutation(len(OBJECT_COLORS))[:n]
        objects = []
        for i in range(n):
            rho = rng.uniform(*cfg.radius_range)
            z0 = rng.uniform(*cfg.depth_range)
            u0 = rng.uniform(0.15 * W, 0.85 * W)
            x0 = (u0 - cx) * z0 / focal
            y0 = cfg.ground_height - rho - rng.uniform(0.3, 0.8)
            vel = (rng.uniform(-cfg.lateral_speed, cfg.lateral_speed), 0.0,
                   rng.uniform(-cfg.depth_speed, cfg.depth_speed))
            objects.append(ObjectSpec(i, (x0, y0, z0), vel, rho, OBJECT_COLORS[colors[i]]))
        events = []
        if n and F > 2 and rng.random() < cfg.event_prob:
            kind = ("stop", "turn", "swap")[int(rng.integers(0, 3 if n > 1 else 2))]
            frame = int(rng.integers(1, F - 1))
            if kind == "swap":
                pair = tuple(int(x) for x in rng.choice(n, 2, replace=False))
                events.append(Event("swap", frame, pair))
            elif kind == "turn":
                vel = (rng.uniform(-cfg.lateral_speed, cfg.lateral_speed), 0.0,
                       rng.uniform(-cfg.depth_speed, cfg.depth_speed))
                events.append(Event("turn", frame, (int(rng.integers(0, n)),), vel))
            else:
                events.append(Event("stop", frame, (int(rng.integers(0, n)),)))
        spec = SceneSpec(seed, F, H, W, objects, poses, events, cfg.ground_height, cfg.far_clip)
        if _acceptable(spec, cfg):
            return spec
    raise RuntimeError("could not sample a valid scene")


def _acceptable(spec: SceneSpec, cfg: WorldConfig) -> bool:
    sched = velocity_schedule(spec)
    for t, pose in enumerate(spec.poses):
        discs = []
        for obj in spec.objects:
            pc = camera_frame_position(object_position(obj, sched, t), pose)
            if pc[2] < cfg.min_object_depth:
                return False
            discs.append(disc_projection(object_position(obj, sched, t), obj.radius, pose))
        if cfg.inside_margin is not None:
            m = cfg.inside_margin
            for x, y, r, _ in discs:
                if x - r < m or y - r < m or x + r > spec.width - 1 - m or y + r > spec.height - 1 - m:
                    return False
        if cfg.min_separation > 0:
            for a in range(len(discs)):
                for b in range(a + 1, len(discs)):
                    xa, ya, ra, _ = discs[a]
                    xb, yb, rb, _ = discs[b]
                    if np.hypot(xa - xb, ya - yb) < ra + rb + cfg.min_separation:
                        return False
    return True


# --------------------------------------------------------------------------
# on-disk dataset


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _write_json(path: Path, obj) -> None:
    _atomic_write_bytes(path, json.dumps(obj, indent=1).encode())


def write_frames(path: Path, arrays: dict) -> dict:
    """Write named ``(F, H, W, C)`` arrays as one little-endian float32 blob."""
    names = list(arrays)
    stacked = np.concatenate([np.asarray(arrays[n], dtype="<f4") for n in names], axis=-1)
    channels, offset = {}, 0
    for n in names:
        c = arrays[n].shape[-1]
        channels[n] = [offset, offset + c]
        offset += c
    _atomic_write_bytes(path, np.ascontiguousarray(stacked).tobytes())
    sidecar = {
        "dtype": "float32",
        "byte_order": "little",
        "shape": list(stacked.shape),
        "order": ["T", "H", "W", "C"],
        "arrays": channels,
        "sha256": _sha256(path),
    }
    _write_json(path.with_suffix(".json"), sidecar)
    return sidecar


def read_frames(path: Path, verify: bool = True) -> dict:
    path = Path(path)
    try:
        sidecar = json.loads(path.with_suffix(".json").read_text())
        shape = tuple(int(x) for x in sidecar["shape"])
        arrays = sidecar["arrays"]
        if sidecar["dtype"] != "float32" or sidecar.get("byte_order", "little") != "little":
            raise DatasetFormatError(f"unsupported dtype in {path}")
        if len(shape) != 4:
            raise DatasetFormatError(f"expected a 4-D shape in {path}")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(f"bad sidecar for {path}: {exc}") from exc
    raw = path.read_bytes()
    if len(raw) != 4 * int(np.prod(shape)):
        raise DatasetFormatError(f"{path} holds {len(raw)} bytes, sidecar says shape {shape}")
    if verify and "sha256" in sidecar and hashlib.sha256(raw).hexdigest() != sidecar["sha256"]:
        raise ChecksumError(f"checksum mismatch for {path}")
    data = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return {name: data[..., lo:hi].copy() for name, (lo, hi) in arrays.items()}


def tracks_to_json(scene: Scene) -> list:
    return [
        {"id": o.id, "frames": [None if f.tracks.get(o.id) is None else list(f.tracks[o.id])
                                for f in scene.frames]}
        for o in scene.spec.objects
    ]


def write_scene(scene: Scene, scene_dir: Path) -> dict:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    app, depth, valid = scene.stack()
    write_frames(scene_dir / "frames.bin", {
        "appearance": app,
        "depth": depth[..., None],
        "validity": valid[..., None].astype(np.float32),
    })
    _write_json(scene_dir / "tracks.json", tracks_to_json(scene))
    _write_json(scene_dir / "poses.json", [p.to_json() for p in scene.spec.poses])
    _write_json(scene_dir / "spec.json", scene.spec.to_json())
    return {
        "id": scene_dir.name,
        "frames": len(scene.frames),
        "height": scene.spec.height,
        "width": scene.spec.width,
        "checksum": _sha256(scene_dir / "frames.bin"),
        "depth_max": float(depth.max()),
    }


def write_dataset(scenes, directory) -> dict:
    """Persist scenes under ``directory`` and return the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = [write_scene(s, directory / f"scene_{i:05d}") for i, s in enumerate(scenes)]
    manifest = {
        "version": DATASET_VERSION,
        "scenes": entries,
        "depth_min": 0.0,
        "depth_max": max((e["depth_max"] for e in entries), default=0.0),
    }
    _write_json(directory / "manifest.json", manifest)
    return manifest


def read_manifest(directory) -> dict:
    try:
        manifest = json.loads((Path(directory) / "manifest.json").read_text())
        manifest["scenes"]
    except (OSError, ValueError, KeyError) as exc:
        raise DatasetFormatError(f"bad manifest in {directory}: {exc}") from exc
    return manifest


def read_poses(path) -> list:
    return [CameraPose.from_json(p) for p in json.loads(Path(path).read_text())]


def read_tracks(path) -> dict:
    """``tracks.json`` as ``{id: [(x, y, r) or None, ...]}``."""
    return {
        int(obj["id"]): [None if e is None else tuple(e) for e in obj["frames"]]
        for obj in json.loads(Path(path).read_text())
    }


def read_scene(scene_dir, verify: bool = True, checksum: str | None = None) -> Scene:
    scene_dir = Path(scene_dir)
    if checksum is not None and _sha256(scene_dir / "frames.bin") != checksum:
        raise ChecksumError(f"manifest checksum mismatch for {scene_dir}")
    arrays = read_frames(scene_dir / "frames.bin", verify=verify)
    try:
        spec = SceneSpec.from_json(json.loads((scene_dir / "spec.json").read_text()))
        tracks = read_tracks(scene_dir / "tracks.json")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"bad metadata in {scene_dir}: {exc}") from exc
    frames = []
    for t, pose in enumerate(spec.poses):
        frames.append(FrameBundle(
            appearance=arrays["appearance"][t],
            depth=arrays["depth"][t, ..., 0],
            validity=arrays["validity"][t, ..., 0] > 0.5,
            tracks={oid: tr[t] for oid, tr in tracks.items()},
            pose=pose,
        ))
    return Scene(spec, frames)


def read_dataset(directory, verify: bool = True):
    """Yield every scene listed in the manifest, checking stored checksums."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    for entry in manifest["scenes"]:
        yield read_scene(directory / entry["id"], verify=verify,
                         checksum=entry["checksum"] if verify else None)
