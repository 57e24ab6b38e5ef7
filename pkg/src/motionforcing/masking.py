"""Masked point recovery: corruption of the conditioning inputs only.

Three strategies, each independently switchable:

* temporal ego masking - warped-depth frames after ``floor(tau_ego * T)`` are zeroed;
* temporal object masking - point entries after ``floor(tau_obj * T)`` are removed;
* spatial object masking - whole trajectories are dropped with probability ``p_drop``.

Targets (clean depth and video) are never touched here.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .camera_warp import WarpedDepthSequence
from .control import PointTrackSet


@dataclass
class MaskConfig:
    p_drop: float = 0.3
    tau_min: float = 0.3
    ego: bool = True
    temporal_object: bool = True
    spatial_object: bool = True


@dataclass(frozen=True)
class MaskSpec:
    ego_cutoff_ratio: float
    obj_cutoff_ratio: float
    spatial_drops: tuple  # True drops the object's whole trajectory
    p_drop: float
    seed: int | None = None

    def cutoff(self, ratio: float, T: int) -> int:
        # guard against 0.3 * 10 landing just below 3
        return int(np.floor(ratio * T + 1e-9))

    def ego_cutoff(self, T: int) -> int:
        return self.cutoff(self.ego_cutoff_ratio, T)

    def obj_cutoff(self, T: int) -> int:
        return self.cutoff(self.obj_cutoff_ratio, T)

    def to_json(self) -> dict:
        d = asdict(self)
        d["spatial_drops"] = [bool(x) for x in self.spatial_drops]
        return d

    @classmethod
    def identity(cls, num_objects: int) -> "MaskSpec":
        return cls(1.0, 1.0, (False,) * num_objects, 0.0)


def sample_mask_spec(num_objects: int, T: int, p_drop: float, rng, tau_min: float = 0.3,
                     config: MaskConfig | None = None) -> MaskSpec:
    """Draw cutoff ratios from ``U(tau_min, 1)`` and per-object drops from ``Bernoulli(p_drop)``.

    ``rng`` is a seed or a ``numpy.random.Generator``. Disabled strategies in
    ``config`` yield the identity for that strategy (the draws still happen so
    the stream of random numbers does not depend on the switches).
    """
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    if not 0.0 <= tau_min <= 1.0:
        raise ValueError(f"tau_min must lie in [0, 1], got {tau_min}")
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    tau_ego = float(rng.uniform(tau_min, 1.0))
    tau_obj = float(rng.uniform(tau_min, 1.0))
    drops = tuple(bool(x) for x in rng.random(num_objects) < p_drop)
    if config is not None:
        tau_ego = tau_ego if config.ego else 1.0
        tau_obj = tau_obj if config.temporal_object else 1.0
        drops = drops if config.spatial_object else (False,) * num_objects
    return MaskSpec(tau_ego, tau_obj, drops, float(p_drop), seed)


def apply_ego_mask(warped: WarpedDepthSequence, spec: MaskSpec) -> WarpedDepthSequence:
    T = warped.depth.shape[0] - 1
    cut = spec.ego_cutoff(T)
    out = warped.copy()
    out.depth[cut + 1:] = 0.0
    out.holes[cut + 1:] = True
    return out


def apply_object_masks(tracks: PointTrackSet, spec: MaskSpec) -> PointTrackSet:
    ids = tracks.ids
    if len(spec.spatial_drops) != len(ids):
        raise ValueError(f"mask has {len(spec.spatial_drops)} drop flags for {len(ids)} objects")
    cut = spec.obj_cutoff(tracks.frames - 1)
    kept = {}
    for oid, dropped in zip(ids, spec.spatial_drops):
        if dropped:
            continue
        kept[oid] = [e if t <= cut else None for t, e in enumerate(tracks.tracks[oid])]
    return PointTrackSet(tracks.frames, kept)
