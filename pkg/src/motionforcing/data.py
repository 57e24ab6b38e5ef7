"""Assembling training samples and conditioning bundles from scenes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .backbone import LatentCodec
from .camera_warp import WarpedDepthSequence, warp_depth
from .control import PointTrackSet, rasterize_points
from .masking import MaskConfig, MaskSpec, apply_ego_mask, apply_object_masks, sample_mask_spec


def build_conditioning(codec: LatentCodec, reference: np.ndarray, canvas: np.ndarray,
                       warped: WarpedDepthSequence) -> np.ndarray:
    """Channel-concatenate encoded ``I_0`` (broadcast), point canvas and warped depth."""
    F = canvas.shape[0]
    ref = codec.encode_video(np.broadcast_to(reference, (F,) + reference.shape))
    points = codec.encode_video(canvas)
    cam = codec.encode_depth(warped.depth)
    return np.concatenate([ref, points, cam], axis=-1).astype(np.float32)


@dataclass
class SceneArrays:
    """Everything a training sample needs from one scene, kept unencoded."""

    appearance: np.ndarray  # (F, H, W, 3)
    depth: np.ndarray  # (F, H, W)
    warped: WarpedDepthSequence
    tracks: PointTrackSet

    @classmethod
    def from_scene(cls, scene, splat_value: str = "target") -> "SceneArrays":
        app, depth, valid = scene.stack()
        warped = warp_depth(depth[0], valid[0], scene.spec.poses, splat_value)
        warped = WarpedDepthSequence(warped.depth.astype(np.float32), warped.holes)
        return cls(app.astype(np.float32), depth.astype(np.float32), warped, PointTrackSet.from_scene(scene))

    @property
    def shape(self):
        return self.depth.shape


def masked_conditioning(codec, sample: SceneArrays, spec: MaskSpec) -> np.ndarray:
    warped = apply_ego_mask(sample.warped, spec)
    tracks = apply_object_masks(sample.tracks, spec)
    canvas = rasterize_points(tracks, sample.shape)
    return build_conditioning(codec, sample.appearance[0], canvas, warped)


@dataclass
class Batch:
    z_depth: torch.Tensor  # clean depth latents (B, F, h, w, C)
    z_video: torch.Tensor  # clean video latents
    cond: torch.Tensor  # (B, F, h, w, 3C)
    masks: list


def encode_targets(codec, samples):
    z_d = np.stack([codec.encode_depth(s.depth) for s in samples])
    z_v = np.stack([codec.encode_video(s.appearance) for s in samples])
    return torch.from_numpy(z_d), torch.from_numpy(z_v)


def make_batch(codec: LatentCodec, samples, rng: np.random.Generator,
               mask_config: MaskConfig | None = None) -> Batch:
    """Encode targets and build an independently masked bundle for every sample."""
    mask_config = mask_config or MaskConfig()
    conds, specs = [], []
    for s in samples:
        T = s.shape[0] - 1
        spec = sample_mask_spec(len(s.tracks.ids), T, mask_config.p_drop, rng,
                                mask_config.tau_min, mask_config)
        specs.append(spec)
        conds.append(masked_conditioning(codec, s, spec))
    z_d, z_v = encode_targets(codec, samples)
    return Batch(z_d, z_v, torch.from_numpy(np.stack(conds)), specs)


def unmasked_batch(codec: LatentCodec, samples) -> Batch:
    specs = [MaskSpec.identity(len(s.tracks.ids)) for s in samples]
    conds = [masked_conditioning(codec, s, spec) for s, spec in zip(samples, specs)]
    z_d, z_v = encode_targets(codec, samples)
    return Batch(z_d, z_v, torch.from_numpy(np.stack(conds)), specs)
