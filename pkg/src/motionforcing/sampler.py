"""Two-stage hierarchical inference with a deterministic DDIM loop.

Stage 1 denoises the depth stream while the video stream stays one fixed
draw of pure noise at ``tau_v = T_max``. Stage 2 freezes the generated depth
latent at ``tau_d = 0`` and denoises a fresh video stream.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import LatentCodec, load_checkpoint
from .forcing import NoiseSchedule, check_schedule


class NonFiniteLatentError(RuntimeError):
    pass


def ddim_step(z, eps, tau: int, tau_prev: int, schedule: NoiseSchedule, clip: float | None = None):
    """Deterministic (eta = 0) DDIM update from ``tau`` to ``tau_prev``.

    With ``clip`` the clean-latent estimate is clamped to ``[-clip, clip]`` and
    the noise estimate recomputed from it. Near ``T_max`` the estimate divides
    by ``sqrt(alpha_bar)`` (about 6e-3 at ``T_max - 1`` for the cosine schedule),
    so any prediction error is amplified a hundredfold without it.
    """
    if not tau >= tau_prev >= 0:
        raise ValueError(f"DDIM needs tau >= tau_prev >= 0, got {tau} -> {tau_prev}")
    if tau == tau_prev:
        return z
    ab = schedule.alpha_bar[tau]
    ab_prev = schedule.alpha_bar[tau_prev]
    if ab <= 0:
        raise ValueError("cannot step from a level with alpha_bar = 0")
    x0 = (z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    if clip is not None:
        x0 = x0.clamp(-clip, clip)
        eps = (z - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps


def ddim_timesteps(T_max: int, steps: int) -> list:
    """Descending levels from ``T_max - 1`` to ``0``; ``steps`` denoiser calls."""
    if steps < 1:
        raise ValueError("need at least one step")
    taus = np.round(np.linspace(T_max - 1, 0, steps + 1)).astype(int)
    return sorted(set(taus.tolist()), reverse=True)


@dataclass
class DenoiserCall:
    stage: int
    tau_d: int
    tau_v: int


class Sampler:
    """Runs both stages with one model; every denoiser call is recorded in ``calls``.

    ``clip_x0`` bounds the clean-latent estimate; the codec maps depth and
    colour into ``[-1, 1]`` so 1.0 is the natural bound. ``None`` disables it.
    """

    def __init__(self, model, schedule: NoiseSchedule, codec: LatentCodec, clip_x0: float | None = 1.0):
        check_schedule(model, schedule)
        self.model = model
        self.schedule = schedule
        self.codec = codec
        self.clip_x0 = clip_x0
        self.calls: list = []

    def _latent_shape(self, cond):
        return cond.shape[:-1] + (cond.shape[-1] // 3,)

    @torch.no_grad()
    def _denoise(self, stage, z_d, z_v, tau_d, tau_v, cond):
        self.calls.append(DenoiserCall(stage, int(tau_d), int(tau_v)))
        self.model.eval()
        B = z_d.shape[0]
        eps_d, eps_v = self.model(z_d, z_v, torch.full((B,), int(tau_d)), torch.full((B,), int(tau_v)), cond)
        if not (torch.isfinite(eps_d).all() and torch.isfinite(eps_v).all()):
            raise NonFiniteLatentError(f"non-finite prediction at stage {stage}, tau=({tau_d}, {tau_v})")
        return eps_d, eps_v

    def initial_noise(self, cond, seed: int):
        gen = torch.Generator().manual_seed(int(seed))
        shape = self._latent_shape(cond)
        return torch.randn(shape, generator=gen), torch.randn(shape, generator=gen)

    def stage1(self, cond: torch.Tensor, steps: int, seed: int, return_video_noise: bool = False):
        """Generate a clean depth latent; the video noise is never updated."""
        z_d, z_v = self.initial_noise(cond, seed)
        z_v_before = z_v.clone()
        T = self.schedule.T_max
        taus = ddim_timesteps(T, steps)
        for tau, tau_prev in zip(taus[:-1], taus[1:]):
            eps_d, _ = self._denoise(1, z_d, z_v, tau, T, cond)
            z_d = ddim_step(z_d, eps_d, tau, tau_prev, self.schedule, self.clip_x0)
        if not torch.isfinite(z_d).all():
            raise NonFiniteLatentError("stage 1 produced non-finite latents")
        if return_video_noise:
            return z_d, z_v_before, z_v
        return z_d

    def stage2(self, z_depth: torch.Tensor, cond: torch.Tensor, steps: int, seed: int) -> torch.Tensor:
        """Render the video latent with the depth latent frozen at ``tau_d = 0``."""
        if not torch.isfinite(z_depth).all():
            raise NonFiniteLatentError("depth latent is not finite")
        gen = torch.Generator().manual_seed(int(seed))
        z_v = torch.randn(self._latent_shape(cond), generator=gen)
        taus = ddim_timesteps(self.schedule.T_max, steps)
        for tau, tau_prev in zip(taus[:-1], taus[1:]):
            _, eps_v = self._denoise(2, z_depth, z_v, 0, tau, cond)
            z_v = ddim_step(z_v, eps_v, tau, tau_prev, self.schedule, self.clip_x0)
        if not torch.isfinite(z_v).all():
            raise NonFiniteLatentError("stage 2 produced non-finite latents")
        return z_v

    def audit(self) -> dict:
        """Check every recorded call against the stage pinning rules."""
        T = self.schedule.T_max
        bad1 = [c for c in self.calls if c.stage == 1 and c.tau_v != T]
        bad2 = [c for c in self.calls if c.stage == 2 and c.tau_d != 0]
        return {
            "calls": len(self.calls),
            "stage1_calls": sum(c.stage == 1 for c in self.calls),
            "stage2_calls": sum(c.stage == 2 for c in self.calls),
            "violations": len(bad1) + len(bad2),
            "passed": not bad1 and not bad2,
        }


@dataclass
class SampleRun:
    seeds: tuple
    steps: tuple
    depth_latent: torch.Tensor
    video_latent: torch.Tensor
    depth: np.ndarray  # decoded (B, F, H, W)
    video: np.ndarray  # decoded (B, F, H, W, 3)
    audit: dict = field(default_factory=dict)


def sample(model, schedule, codec, cond, steps=(50, 50), seeds=(0, 1), edit=None,
           clip_x0: float | None = 1.0) -> SampleRun:
    """Full two-stage generation; ``edit(depth_latent) -> depth_latent`` runs between stages."""
    sampler = Sampler(model, schedule, codec, clip_x0)
    z_d = sampler.stage1(cond, steps[0], seeds[0])
    if edit is not None:
        z_d = edit(z_d)
    z_v = sampler.stage2(z_d, cond, steps[1], seeds[1])
    return SampleRun(
        seeds=tuple(seeds), steps=tuple(steps), depth_latent=z_d, video_latent=z_v,
        depth=codec.decode_depth(z_d.numpy()), video=np.clip(codec.decode_video(z_v.numpy()), 0.0, 1.0),
        audit=sampler.audit(),
    )


def load_pipeline(path):
    """``(model, schedule, codec, payload)`` from a training checkpoint."""
    model, payload = load_checkpoint(path)
    schedule = NoiseSchedule(model.config.T_max, model.config.schedule)
    model.eval()
    return model, schedule, model.config.codec(), payload


# --------------------------------------------------------------------------
# depth editing


@dataclass
class DepthEdit:
    """Pixel-space edit on decoded depth.

    ``delete``: pixels in ``mask`` (or the ``box`` ``(x0, y0, x1, y1)``,
    exclusive upper bounds) are replaced by ``background`` depth.
    ``translate``: the masked pixels move by ``shift = (dx, dy)`` and the vacated
    pixels are filled with ``background``.
    """

    op: str
    frames: tuple
    mask: np.ndarray | None = None
    box: tuple | None = None
    shift: tuple = (0, 0)
    background: np.ndarray | float | None = None

    @classmethod
    def from_json(cls, obj: dict) -> "DepthEdit":
        return cls(op=obj["op"], frames=tuple(obj["frames"]),
                   box=None if obj.get("box") is None else tuple(obj["box"]),
                   shift=tuple(obj.get("shift", (0, 0))), background=obj.get("background"))


def _region(edit: DepthEdit, shape) -> np.ndarray:
    H, W = shape
    if edit.mask is not None:
        m = np.asarray(edit.mask, dtype=bool)
        if m.shape[-2:] != (H, W):
            raise ValueError(f"edit mask shape {m.shape} does not match depth {(H, W)}")
        return m
    if edit.box is None:
        raise ValueError("an edit needs a mask or a box")
    x0, y0, x1, y1 = (int(v) for v in edit.box)
    if not (0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H):
        raise ValueError(f"edit box {edit.box} outside image {(W, H)}")
    m = np.zeros((H, W), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def apply_depth_edits(depth: np.ndarray, edits) -> np.ndarray:
    """Apply edits to one decoded depth sequence ``(F, H, W)``."""
    out = np.array(depth, dtype=np.float64, copy=True)
    F, H, W = out.shape
    for edit in edits:
        region = _region(edit, (H, W))
        for t in edit.frames:
            if not 0 <= t < F:
                raise ValueError(f"edit frame {t} out of range")
            m = region[t] if region.ndim == 3 else region
            bg = edit.background
            if bg is None:
                fill = np.full((H, W), np.median(out[t][~m]) if (~m).any() else 0.0)
            else:
                bg = np.asarray(bg, dtype=np.float64)
                fill = np.broadcast_to(bg[t] if bg.ndim == 3 else bg, (H, W))
            if edit.op == "delete":
                out[t][m] = fill[m]
            elif edit.op == "translate":
                dx, dy = (int(v) for v in edit.shift)
                vs, us = np.nonzero(m)
                vals = out[t][vs, us].copy()
                out[t][m] = fill[m]
                vt, ut = vs + dy, us + dx
                keep = (vt >= 0) & (vt < H) & (ut >= 0) & (ut < W)
                out[t][vt[keep], ut[keep]] = vals[keep]
            else:
                raise ValueError(f"unknown edit op {edit.op!r}")
    return out


def edit_depth(depth_latent, edits, codec: LatentCodec) -> torch.Tensor:
    """Decode, edit in pixel space and re-encode a ``(B, F, h, w, C)`` depth latent."""
    z = depth_latent.numpy() if isinstance(depth_latent, torch.Tensor) else np.asarray(depth_latent)
    decoded = codec.decode_depth(z)
    edited = np.stack([apply_depth_edits(d, edits) for d in decoded])
    return torch.from_numpy(codec.encode_depth(edited).astype(np.float32))
