"""Unified dual-stream denoiser.

Depth and video latents are concatenated along the frame axis into one
sequence of ``2F`` frames. Every normalisation inside the network is a dual
AdaLN: the depth half is modulated by the embedding of ``tau_d`` and the video
half by the embedding of ``tau_v``. Attention is factorised into a spatial
pass (within one frame of one stream) and a temporal pass (across all ``2F``
frames at one spatial site), the latter being where the streams exchange
information.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class LatentCodec:
    """Fixed, invertible patchify codec standing in for a learned VAE.

    A frame ``(H, W, k)`` becomes a grid ``(H/p, W/p, k*p*p)``. Appearance in
    ``[0, 1]`` maps to ``[-1, 1]``; metric depth in ``[depth_min, depth_max]``
    maps to ``[-1, 1]`` and is zero-padded to ``k`` channels.
    """

    def __init__(self, patch: int = 4, channels: int = 3, depth_min: float = 0.0, depth_max: float = 40.0):
        if depth_max <= depth_min:
            raise ValueError("depth_max must exceed depth_min")
        self.patch = patch
        self.channels = channels
        self.depth_min = float(depth_min)
        self.depth_max = float(depth_max)

    @property
    def latent_channels(self) -> int:
        return self.channels * self.patch ** 2

    def patchify(self, x: np.ndarray) -> np.ndarray:
        *lead, H, W, k = x.shape
        p = self.patch
        if H % p or W % p:
            raise ValueError(f"frame size {(H, W)} is not divisible by patch {p}")
        x = x.reshape(*lead, H // p, p, W // p, p, k)
        n = len(lead)
        x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
        return x.reshape(*lead, H // p, W // p, p * p * k)

    def unpatchify(self, z: np.ndarray) -> np.ndarray:
        *lead, h, w, c = z.shape
        p = self.patch
        k = c // (p * p)
        z = z.reshape(*lead, h, w, p, p, k)
        n = len(lead)
        z = z.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
        return z.reshape(*lead, h * p, w * p, k)

    def encode_video(self, x: np.ndarray) -> np.ndarray:
        return self.patchify(np.asarray(x, dtype=np.float32) * 2.0 - 1.0)

    def decode_video(self, z: np.ndarray) -> np.ndarray:
        return (self.unpatchify(np.asarray(z)) + 1.0) / 2.0

    def normalize_depth(self, d):
        return (np.asarray(d, dtype=np.float32) - self.depth_min) / (self.depth_max - self.depth_min) * 2.0 - 1.0

    def denormalize_depth(self, d):
        return (np.asarray(d) + 1.0) / 2.0 * (self.depth_max - self.depth_min) + self.depth_min

    def encode_depth(self, d: np.ndarray) -> np.ndarray:
        d = self.normalize_depth(d)[..., None]
        pad = np.zeros(d.shape[:-1] + (self.channels - 1,), dtype=d.dtype)
        return self.patchify(np.concatenate([d, pad], axis=-1))

    def decode_depth(self, z: np.ndarray) -> np.ndarray:
        return self.denormalize_depth(self.unpatchify(np.asarray(z))[..., 0])


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return emb.to(torch.get_default_dtype() if not t.is_floating_point() else t.dtype)


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int, frequency_dim: int = 128):
        super().__init__()
        self.frequency_dim = frequency_dim
        self.mlp = nn.Sequential(nn.Linear(frequency_dim, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(timestep_embedding(t, self.frequency_dim).to(dtype))


class DualAdaLN(nn.Module):
    """LayerNorm whose scale/shift differ on either side of a stream boundary.

    ``out[:, :b] = LN(h[:, :b]) * gamma(e_d) + beta(e_d)`` and likewise for the
    video half with ``e_v``. ``gamma = 1 + s`` where ``s`` and ``beta`` come from
    one zero-initialised linear map, so a fresh layer is a plain LayerNorm.
    """

    def __init__(self, width: int, cond_width: int | None = None):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.modulation = nn.Linear(cond_width or width, 2 * width)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def affine(self, emb: torch.Tensor):
        shift, scale = self.modulation(F.silu(emb)).chunk(2, dim=-1)
        return 1.0 + scale, shift

    def forward(self, h: torch.Tensor, emb_d: torch.Tensor, emb_v: torch.Tensor, boundary: int) -> torch.Tensor:
        L = h.shape[1]
        if not 0 < boundary < L:
            raise ValueError(f"stream boundary {boundary} outside (0, {L})")
        n = self.norm(h)
        extra = (1,) * (h.dim() - 2)
        gd, bd = (a.view(a.shape[0], *extra, a.shape[-1]) for a in self.affine(emb_d))
        gv, bv = (a.view(a.shape[0], *extra, a.shape[-1]) for a in self.affine(emb_v))
        return torch.cat([n[:, :boundary] * gd + bd, n[:, boundary:] * gv + bv], dim=1)


class AdaLN(nn.Module):
    """Single-timestep reference: the same map applied with one embedding."""

    def __init__(self, dual: DualAdaLN):
        super().__init__()
        self.dual = dual

    def forward(self, h, emb):
        g, b = self.dual.affine(emb)
        extra = (1,) * (h.dim() - 2)
        return self.dual.norm(h) * g.view(g.shape[0], *extra, -1) + b.view(b.shape[0], *extra, -1)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm_space = DualAdaLN(width)
        self.attn_space = Attention(width, heads)
        self.norm_time = DualAdaLN(width)
        self.attn_time = Attention(width, heads)
        self.norm_mlp = DualAdaLN(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, width))

    def forward(self, x, emb_d, emb_v, boundary):
        B, S, N, D = x.shape  # S = 2F frames, N sites per frame
        h = self.norm_space(x, emb_d, emb_v, boundary)
        x = x + self.attn_space(h.reshape(B * S, N, D)).view(B, S, N, D)
        h = self.norm_time(x, emb_d, emb_v, boundary)
        h = h.transpose(1, 2).reshape(B * N, S, D)
        x = x + self.attn_time(h).view(B, N, S, D).transpose(1, 2)
        return x + self.mlp(self.norm_mlp(x, emb_d, emb_v, boundary))


@dataclass
class ModelConfig:
    frames: int = 9
    height: int = 64
    width: int = 64
    patch: int = 4
    channels: int = 3
    hidden: int = 128
    blocks: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    depth_min: float = 0.0
    depth_max: float = 40.0
    T_max: int = 1000
    schedule: str = "cosine"

    @property
    def grid(self) -> tuple:
        return self.height // self.patch, self.width // self.patch

    @property
    def latent_channels(self) -> int:
        return self.channels * self.patch ** 2

    def codec(self) -> LatentCodec:
        return LatentCodec(self.patch, self.channels, self.depth_min, self.depth_max)


class MotionForcingDiT(nn.Module):
    """Noise predictor ``eps(z_d ++ z_v, tau_d, tau_v, I_0, P, W)``.

    Latents are ``(B, F, h, w, C)``; the conditioning tensor is the channel
    concatenation of encoded reference frame, point canvas and warped depth,
    ``(B, F, h, w, 3C)``, fed identically to both streams.

    The head predicts ``v = sqrt(ab) eps - sqrt(1 - ab) x0`` and returns
    ``eps = sqrt(ab) v + sqrt(1 - ab) z`` per stream, with ``ab`` taken at that
    stream's own timestep. Near pure noise the target is almost the input
    itself, which a token with more latent channels than hidden width cannot
    copy through, and a raw noise head would have its errors multiplied by
    ``1 / sqrt(ab)`` in the clean estimate. ``v`` also gets two skip terms
    that bypass the hidden width: ``gain(tau) * z``, with the gain taken
    from the stream's own embedding, and ``-sqrt(1 - ab) * L(cond)``, where
    ``L`` is a per-stream, per-token linear guess of the clean latent (the
    warped depth and point discs are pixel-aligned with the target) entering
    with the coefficient that ``x0`` has in ``v``.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        C, D = config.latent_channels, config.hidden
        h, w = config.grid
        self.embed = nn.Linear(4 * C, D)
        self.pos_space = nn.Parameter(torch.randn(h * w, D) * 0.02)
        self.pos_time = nn.Parameter(torch.randn(config.frames, D) * 0.02)
        self.pos_stream = nn.Parameter(torch.randn(2, D) * 0.02)
        self.t_embed = TimestepEmbedder(D)
        self.blocks = nn.ModuleList(Block(D, config.heads, config.mlp_ratio) for _ in range(config.blocks))
        self.norm_out = DualAdaLN(D)
        self.out = nn.Linear(D, C)
        self.skip_gain = nn.Linear(D, C)
        self.cond_skip = nn.Linear(3 * C, 2 * C)
        for layer in (self.skip_gain, self.cond_skip):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)
        from .forcing import NoiseSchedule

        ab = NoiseSchedule(config.T_max, config.schedule).alpha_bar
        self.register_buffer("alpha_bar", torch.tensor(ab, dtype=torch.float32), persistent=False)

    def forward(self, z_d, z_v, tau_d, tau_v, cond):
        if z_d.shape != z_v.shape:
            raise ValueError(f"stream shapes differ: {tuple(z_d.shape)} vs {tuple(z_v.shape)}")
        B, Fr, h, w, C = z_d.shape
        if cond.shape[:4] != z_d.shape[:4] or cond.shape[-1] != 3 * C:
            raise ValueError(f"conditioning shape {tuple(cond.shape)} does not match latents {tuple(z_d.shape)}")
        N = h * w
        guess_d, guess_v = self.cond_skip(cond).chunk(2, dim=-1)
        cond = cond.reshape(B, Fr, N, 3 * C)
        x = torch.cat([
            torch.cat([z_d.reshape(B, Fr, N, C), cond], dim=-1),
            torch.cat([z_v.reshape(B, Fr, N, C), cond], dim=-1),
        ], dim=1)
        x = self.embed(x) + self.pos_space[None, None]
        x = x + self.pos_time[:Fr].repeat(2, 1)[None, :, None]
        stream = torch.cat([self.pos_stream[0].expand(Fr, -1), self.pos_stream[1].expand(Fr, -1)])
        x = x + stream[None, :, None]
        tau_d = torch.as_tensor(tau_d).reshape(-1).expand(B)
        tau_v = torch.as_tensor(tau_v).reshape(-1).expand(B)
        for tau in (tau_d, tau_v):
            if tau.min() < 0 or tau.max() > self.config.T_max:
                raise ValueError(f"timestep outside [0, {self.config.T_max}]")
        emb_d = self.t_embed(tau_d)
        emb_v = self.t_embed(tau_v)
        for block in self.blocks:
            x = block(x, emb_d, emb_v, Fr)
        x = self.out(self.norm_out(x, emb_d, emb_v, Fr))
        return (self._to_eps(x[:, :Fr].reshape(B, Fr, h, w, C), z_d, guess_d, emb_d, tau_d),
                self._to_eps(x[:, Fr:].reshape(B, Fr, h, w, C), z_v, guess_v, emb_v, tau_v))

    def _to_eps(self, head, z, guess, emb, tau):
        B, C = z.shape[0], z.shape[-1]
        ab = self.alpha_bar[tau.long()].to(z.dtype).view(B, 1, 1, 1, 1)
        v = head + self.skip_gain(F.silu(emb)).view(B, 1, 1, 1, C) * z - (1.0 - ab).sqrt() * guess
        return ab.sqrt() * v + (1.0 - ab).sqrt() * z


def save_checkpoint(path, model: MotionForcingDiT, extra: dict | None = None, config_snapshot: dict | None = None) -> None:
    """Write parameters plus config snapshot atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model_config": asdict(model.config),
        "config": json.dumps(config_snapshot or {}),
        "state_dict": model.state_dict(),
        **(extra or {}),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Return ``(model, payload)``; raise if ``expected`` disagrees with the stored config."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    stored = ModelConfig(**payload["model_config"])
    if expected is not None and asdict(expected) != asdict(stored):
        diff = {k: (v, asdict(expected)[k]) for k, v in asdict(stored).items() if asdict(expected)[k] != v}
        raise ValueError(f"checkpoint config incompatible: {diff}")
    model = MotionForcingDiT(stored)
    model.load_state_dict(payload["state_dict"])
    payload["config"] = json.loads(payload.get("config") or "{}")
    return model, payload
