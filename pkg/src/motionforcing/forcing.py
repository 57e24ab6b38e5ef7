"""Training engine: noise schedule, stochastic mode switching and the loop.

Each sample in a batch independently runs one of two sub-problems:

* Mode I (reasoning): ``tau_v = T_max`` so the video stream is pure noise,
  ``tau_d ~ U{0..T_max-1}``, loss on the depth-stream noise only.
* Mode II (rendering): ``tau_d = 0`` so the depth stream is clean,
  ``tau_v ~ U{0..T_max-1}``, loss on the video-stream noise only.
"""
from __future__ import annotations

import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .backbone import ModelConfig, MotionForcingDiT, load_checkpoint, save_checkpoint
from .config import Config, dump_config
from .data import SceneArrays, make_batch, unmasked_batch
from .worldgen import read_dataset, read_manifest

log = logging.getLogger(__name__)

MODE_REASON = 1
MODE_RENDER = 2


class NonFiniteLossError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class NoiseSchedule:
    """Cosine cumulative signal coefficients with ``alpha_bar[0] = 1`` and ``alpha_bar[T_max] = 0``."""

    def __init__(self, T_max: int = 1000, kind: str = "cosine", offset: float = 0.008):
        if T_max < 2:
            raise ValueError("T_max must be at least 2")
        if kind != "cosine":
            raise ValueError(f"unsupported schedule {kind!r}")
        self.T_max = int(T_max)
        self.kind = kind
        t = np.arange(T_max + 1, dtype=np.float64) / T_max
        f = np.cos((t + offset) / (1 + offset) * math.pi / 2) ** 2
        ab = f / f[0]
        ab[0], ab[-1] = 1.0, 0.0
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar is not strictly decreasing")
        self.alpha_bar = ab
        self._ab = torch.from_numpy(ab)

    def coefficients(self, tau, like: torch.Tensor):
        tau = torch.as_tensor(tau, dtype=torch.long).reshape(-1)
        if tau.numel() and (tau.min() < 0 or tau.max() > self.T_max):
            raise ValueError(f"timestep outside [0, {self.T_max}]")
        ab = self._ab[tau]
        shape = (-1,) + (1,) * (like.dim() - 1)
        return ab.sqrt().to(like.dtype).view(shape), (1.0 - ab).sqrt().to(like.dtype).view(shape)


def add_noise(z_clean: torch.Tensor, tau, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(ab[tau]) * z_clean + sqrt(1 - ab[tau]) * eps`` with per-sample ``tau``."""
    a, s = schedule.coefficients(tau, z_clean)
    return a * z_clean + s * eps


def forcing_loss(model, z_depth, z_video, cond, modes, tau_d, tau_v, eps_d, eps_v, schedule):
    """Per-mode noise-prediction MSE; returns ``(batch_loss, per_sample_losses)``."""
    check_schedule(model, schedule)
    modes = torch.as_tensor(modes)
    zd = add_noise(z_depth, tau_d, eps_d, schedule)
    zv = add_noise(z_video, tau_v, eps_v, schedule)
    pred_d, pred_v = model(zd, zv, torch.as_tensor(tau_d), torch.as_tensor(tau_v), cond)
    dims = tuple(range(1, z_depth.dim()))
    loss_d = ((eps_d - pred_d) ** 2).mean(dim=dims)
    loss_v = ((eps_v - pred_v) ** 2).mean(dim=dims)
    per_sample = torch.where(modes == MODE_REASON, loss_d, loss_v)
    return per_sample.mean(), per_sample


@dataclass
class TrainStep:
    step: int
    modes: list
    tau_d: list
    tau_v: list
    loss: float
    loss_mode1: float | None
    loss_mode2: float | None
    grad_norm: float
    lr: float
    masks: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "step": self.step, "loss": self.loss, "loss_mode1": self.loss_mode1,
            "loss_mode2": self.loss_mode2, "grad_norm": self.grad_norm, "lr": self.lr,
            "modes": self.modes, "tau_d": self.tau_d, "tau_v": self.tau_v,
            "masks": [m.to_json() for m in self.masks],
        }


def sample_modes(batch_size: int, schedule: NoiseSchedule, p_mode1: float, rng: np.random.Generator):
    """Draw a mode per sample and the matching pair of timesteps."""
    modes = np.where(rng.random(batch_size) < p_mode1, MODE_REASON, MODE_RENDER)
    taus = rng.integers(0, schedule.T_max, size=batch_size)
    tau_d = np.where(modes == MODE_REASON, taus, 0)
    tau_v = np.where(modes == MODE_REASON, schedule.T_max, taus)
    return modes, tau_d, tau_v


def training_step(model, optimizer, batch, schedule: NoiseSchedule, rng: np.random.Generator,
                  generator: torch.Generator, p_mode1: float = 0.5, grad_clip: float | None = 1.0,
                  step: int = 0) -> TrainStep:
    B = batch.z_depth.shape[0]
    modes, tau_d, tau_v = sample_modes(B, schedule, p_mode1, rng)
    eps_d = torch.randn(batch.z_depth.shape, generator=generator, dtype=batch.z_depth.dtype)
    eps_v = torch.randn(batch.z_video.shape, generator=generator, dtype=batch.z_video.dtype)
    model.train()
    loss, per_sample = forcing_loss(model, batch.z_depth, batch.z_video, batch.cond,
                                    modes, tau_d, tau_v, eps_d, eps_v, schedule)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss at step {step}: modes={modes.tolist()} tau_d={tau_d.tolist()} "
            f"tau_v={tau_v.tolist()} per_sample={per_sample.tolist()}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    if grad_clip:
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, grad_clip))
    else:
        grad_norm = float(torch.norm(torch.stack([p.grad.norm() for p in params])))
    optimizer.step()
    per = per_sample.detach().numpy()
    m1, m2 = per[modes == MODE_REASON], per[modes == MODE_RENDER]
    return TrainStep(
        step=step,
        modes=modes.tolist(),
        tau_d=tau_d.tolist(),
        tau_v=tau_v.tolist(),
        loss=float(loss.detach()),
        loss_mode1=float(m1.mean()) if len(m1) else None,
        loss_mode2=float(m2.mean()) if len(m2) else None,
        grad_norm=grad_norm,
        lr=optimizer.param_groups[0]["lr"],
        masks=list(batch.masks),
    )


def warmup_lr(step: int, base: float, warmup: int) -> float:
    """Linear warmup: ``base * step / warmup`` for 1-based ``step <= warmup``."""
    if warmup <= 0:
        return base
    return base * min(1.0, step / warmup)


def make_optimizer(model, train_cfg) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=train_cfg.lr, betas=tuple(train_cfg.betas),
                             weight_decay=train_cfg.weight_decay)


class DivergenceMonitor:
    """Flags a run whose loss stays above ``factor`` x the running median."""

    def __init__(self, factor: float = 10.0, patience: int = 100, window: int = 500):
        self.factor = factor
        self.patience = patience
        self.history = deque(maxlen=window)
        self.streak = 0

    def update(self, loss: float) -> bool:
        if len(self.history) >= 10 and loss > self.factor * float(np.median(self.history)):
            self.streak += 1
        else:
            self.streak = 0
        self.history.append(loss)
        return self.streak >= self.patience


@torch.no_grad()
def heldout_losses(model, batch, schedule: NoiseSchedule, seed: int = 1234) -> dict:
    """Mode I and Mode II losses on a fixed batch with fixed noise and timesteps."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    B = batch.z_depth.shape[0]
    eps_d = torch.randn(batch.z_depth.shape, generator=gen)
    eps_v = torch.randn(batch.z_video.shape, generator=gen)
    taus = np.linspace(0, schedule.T_max - 1, B).round().astype(int)
    out = {}
    for mode in (MODE_REASON, MODE_RENDER):
        modes = np.full(B, mode)
        tau_d = taus if mode == MODE_REASON else np.zeros(B, dtype=int)
        tau_v = np.full(B, schedule.T_max) if mode == MODE_REASON else taus
        loss, _ = forcing_loss(model, batch.z_depth, batch.z_video, batch.cond, modes,
                               tau_d, tau_v, eps_d, eps_v, schedule)
        out[f"heldout_mode{mode}"] = float(loss)
    return out


def load_scene_arrays(data_dir, splat_value: str = "target") -> tuple[list, dict]:
    manifest = read_manifest(data_dir)
    return [SceneArrays.from_scene(s, splat_value) for s in read_dataset(data_dir)], manifest


def model_config_for(config: Config, manifest: dict) -> ModelConfig:
    first = manifest["scenes"][0]
    return replace(config.model, frames=first["frames"], height=first["height"], width=first["width"],
                   depth_min=float(manifest["depth_min"]), depth_max=float(manifest["depth_max"]),
                   T_max=config.schedule.T_max, schedule=config.schedule.kind)


def check_schedule(model, schedule: NoiseSchedule) -> None:
    """The denoiser's output parameterisation is tied to one schedule."""
    mc = model.config
    if (mc.T_max, mc.schedule) != (schedule.T_max, schedule.kind):
        raise ValueError(f"model was built for schedule ({mc.T_max}, {mc.schedule}), "
                         f"got ({schedule.T_max}, {schedule.kind})")


def _rng_state(rng, gen):
    return {"numpy": rng.bit_generator.state, "torch": gen.get_state()}


def train(config: Config, data, out_dir, resume=None, manifest: dict | None = None,
          callback=None) -> Path:
    """Run the training loop; returns the path of the final checkpoint.

    ``data`` is a dataset directory or a list of :class:`SceneArrays` (then
    ``manifest`` supplies the depth range). Writes ``metrics.jsonl`` and
    ``checkpoint.pt`` (plus ``checkpoint_<step>.pt`` snapshots) into
    ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = config.train
    if isinstance(data, (str, Path)):
        scenes, manifest = load_scene_arrays(data, tc.splat_value)
    else:
        scenes = list(data)
    if manifest is None:
        raise ValueError("a manifest is required when passing scenes directly")
    mcfg = model_config_for(config, manifest)
    config = replace(config, model=mcfg)
    codec = mcfg.codec()
    schedule = NoiseSchedule(config.schedule.T_max, config.schedule.kind)

    n_held = min(tc.heldout, max(len(scenes) - 1, 0))
    train_set = scenes[: len(scenes) - n_held] if n_held else scenes
    heldout = unmasked_batch(codec, scenes[len(scenes) - n_held:]) if n_held else None

    torch.manual_seed(tc.seed)
    model = MotionForcingDiT(mcfg)
    optimizer = make_optimizer(model, tc)
    rng = np.random.default_rng(tc.seed)
    gen = torch.Generator().manual_seed(tc.seed)
    start, elapsed = 0, 0.0
    if resume is not None:
        model, payload = load_checkpoint(resume, expected=mcfg)
        optimizer = make_optimizer(model, tc)
        optimizer.load_state_dict(payload["optimizer"])
        rng.bit_generator.state = payload["rng"]["numpy"]
        gen.set_state(payload["rng"]["torch"])
        start, elapsed = payload["step"], payload.get("elapsed", 0.0)

    monitor = DivergenceMonitor(tc.divergence_factor, tc.divergence_patience)
    metrics_path = out_dir / "metrics.jsonl"
    (out_dir / "config.cfg").write_text(dump_config(config))
    t0 = time.time() - elapsed
    window = []

    def checkpoint(step, name="checkpoint.pt"):
        save_checkpoint(out_dir / name, model, extra={
            "optimizer": optimizer.state_dict(),
            "rng": _rng_state(rng, gen),
            "step": step,
            "elapsed": time.time() - t0,
        }, config_snapshot=config.to_dict())

    step = start
    with open(metrics_path, "a") as mlog:
        if heldout is not None and start == 0:
            mlog.write(json.dumps({"step": 0, **heldout_losses(model, heldout, schedule)}) + "\n")
        for step in range(start + 1, tc.steps + 1):
            lr = warmup_lr(step, tc.lr, tc.warmup)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = rng.choice(len(train_set), size=min(tc.batch_size, len(train_set)), replace=False)
            batch = make_batch(codec, [train_set[i] for i in idx], rng, config.mask)
            ts = training_step(model, optimizer, batch, schedule, rng, gen, tc.p_mode1, tc.grad_clip, step)
            window.append(ts)
            if callback is not None:
                callback(ts)
            if monitor.update(ts.loss):
                checkpoint(step, "diverged.pt")
                raise TrainingDivergedError(
                    f"loss above {tc.divergence_factor}x running median for {tc.divergence_patience} steps"
                )
            out_of_time = (time.time() - t0) > tc.max_hours * 3600
            if step % tc.log_every == 0 or step == tc.steps or out_of_time:
                m1 = [t.loss_mode1 for t in window if t.loss_mode1 is not None]
                m2 = [t.loss_mode2 for t in window if t.loss_mode2 is not None]
                record = {
                    "step": step,
                    "loss": float(np.mean([t.loss for t in window])),
                    "loss_mode1": float(np.mean(m1)) if m1 else None,
                    "loss_mode2": float(np.mean(m2)) if m2 else None,
                    "grad_norm": float(np.mean([t.grad_norm for t in window])),
                    "lr": lr,
                    "elapsed": time.time() - t0,
                }
                if heldout is not None:
                    record.update(heldout_losses(model, heldout, schedule))
                mlog.write(json.dumps(record) + "\n")
                mlog.flush()
                log.info("step %d loss %.4f", step, record["loss"])
                window = []
            if step % tc.ckpt_every == 0:
                checkpoint(step, f"checkpoint_{step:06d}.pt")
                checkpoint(step)
            if out_of_time:
                log.warning("time budget of %.2f h reached at step %d", tc.max_hours, step)
                break
    checkpoint(step)
    return out_dir / "checkpoint.pt"
