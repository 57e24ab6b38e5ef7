"""Pinhole camera model and forward depth warping.

Camera convention: ``x_cam = R @ x_world + t`` with x right, y down, z forward.
Pixel ``(u, v)`` is column ``u``, row ``v``; integer coordinates are pixel
centres.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEAR_CLIP = 1e-4


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera extrinsics ``(R, t)`` and intrinsics ``K``."""

    R: np.ndarray
    t: np.ndarray
    K: np.ndarray
    K_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-6:
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("det(R) must be +1")
        if K[2, 2] != 1.0 or K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError("K must be upper triangular with K[2, 2] == 1")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        for name, value in (("R", R), ("t", t), ("K", K)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        K_inv = np.linalg.inv(K)
        K_inv.setflags(write=False)
        object.__setattr__(self, "K_inv", K_inv)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_json(self) -> dict:
        return {
            "R": [float(x) for x in self.R.ravel()],
            "t": [float(x) for x in self.t],
            "K": [float(x) for x in self.K.ravel()],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CameraPose":
        return cls(R=np.array(obj["R"]), t=np.array(obj["t"]), K=np.array(obj["K"]))


def intrinsics(focal: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])


def unproject(u: float, v: float, depth: float, pose: CameraPose) -> np.ndarray:
    """Lift pixel ``(u, v)`` at camera-frame depth ``depth`` to a world point."""
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    ray = pose.K_inv @ np.array([u, v, 1.0])
    return pose.R.T @ (depth * ray - pose.t)


def project(p_world, pose: CameraPose) -> tuple[np.ndarray, float]:
    """Project a world point; returns pixel ``(u, v)`` and camera-frame depth."""
    p_cam = pose.R @ np.asarray(p_world, dtype=np.float64) + pose.t
    z = float(p_cam[2])
    if z <= NEAR_CLIP:
        raise BehindCameraError(f"point is behind the camera (z={z})")
    q = pose.K @ p_cam
    return np.array([q[0] / q[2], q[1] / q[2]]), z


@dataclass
class WarpedDepthSequence:
    depth: np.ndarray  # (F, H, W), 0 marks a hole
    holes: np.ndarray  # (F, H, W) bool

    @property
    def valid(self) -> np.ndarray:
        return ~self.holes

    def copy(self) -> "WarpedDepthSequence":
        return WarpedDepthSequence(self.depth.copy(), self.holes.copy())


def _affine3(M, b, x, y, z):
    # component-wise so every implementation with the same formula agrees bit-for-bit
    return (
        M[0, 0] * x + M[0, 1] * y + M[0, 2] * z + b[0],
        M[1, 0] * x + M[1, 1] * y + M[1, 2] * z + b[1],
        M[2, 0] * x + M[2, 1] * y + M[2, 2] * z + b[2],
    )


def source_points(d0: np.ndarray, valid: np.ndarray, pose0: CameraPose):
    """World coordinates of every valid source pixel, in row-major order."""
    vs, us = np.nonzero(valid)
    d = d0[vs, us].astype(np.float64)
    u = us.astype(np.float64)
    v = vs.astype(np.float64)
    Ki, R, t = pose0.K_inv, pose0.R, pose0.t
    rx = Ki[0, 0] * u + Ki[0, 1] * v + Ki[0, 2]
    ry = Ki[1, 0] * u + Ki[1, 1] * v + Ki[1, 2]
    rz = Ki[2, 0] * u + Ki[2, 1] * v + Ki[2, 2]
    cx = d * rx - t[0]
    cy = d * ry - t[1]
    cz = d * rz - t[2]
    # R^T applied explicitly
    wx = R[0, 0] * cx + R[1, 0] * cy + R[2, 0] * cz
    wy = R[0, 1] * cx + R[1, 1] * cy + R[2, 1] * cz
    wz = R[0, 2] * cx + R[1, 2] * cy + R[2, 2] * cz
    return (wx, wy, wz), d


def splat_frame(points, source_depth, pose: CameraPose, shape, splat_value="target"):
    """Forward-splat world points into one target frame with a z-buffer."""
    H, W = shape
    wx, wy, wz = points
    x, y, z = _affine3(pose.R, pose.t, wx, wy, wz)
    K = pose.K
    qx = K[0, 0] * x + K[0, 1] * y + K[0, 2] * z
    qy = K[1, 0] * x + K[1, 1] * y + K[1, 2] * z
    qz = K[2, 0] * x + K[2, 1] * y + K[2, 2] * z
    front = z > NEAR_CLIP
    with np.errstate(divide="ignore", invalid="ignore"):
        ut = np.floor(qx / qz + 0.5)
        vt = np.floor(qy / qz + 0.5)
    inside = front & (ut >= 0) & (ut < W) & (vt >= 0) & (vt < H)
    idx = np.nonzero(inside)[0]
    target = vt[idx].astype(np.int64) * W + ut[idx].astype(np.int64)
    zt = z[idx]
    # primary key: target pixel, then nearest z, then source scan order
    order = np.lexsort((idx, zt, target))
    target_sorted = target[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = target_sorted[1:] != target_sorted[:-1]
    winners = order[first]
    out = np.zeros(H * W, dtype=np.float64)
    values = zt if splat_value == "target" else source_depth[idx]
    out[target[winners]] = values[winners]
    hit = np.zeros(H * W, dtype=bool)
    hit[target[winners]] = True
    return out.reshape(H, W), ~hit.reshape(H, W)


def same_pose(a: CameraPose, b: CameraPose) -> bool:
    return a is b or (
        np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t) and np.array_equal(a.K, b.K)
    )


def warp_depth(d0: np.ndarray, valid: np.ndarray | None, poses, splat_value: str = "target") -> WarpedDepthSequence:
    """Warp first-frame depth into every camera of ``poses``.

    Each valid pixel of ``d0`` is unprojected with ``poses[0]``, transformed to
    frame ``t`` and splatted to the nearest pixel. Conflicts keep the smallest
    target-frame depth. ``splat_value="target"`` stores that target depth;
    ``"source"`` stores the original ``d0`` value instead.
    """
    if splat_value not in ("source", "target"):
        raise ValueError(f"splat_value must be 'source' or 'target', got {splat_value!r}")
    d0 = np.asarray(d0, dtype=np.float64)
    if valid is None:
        valid = d0 > 0
    valid = np.asarray(valid, dtype=bool) & (d0 > 0)
    H, W = d0.shape
    points, src = source_points(d0, valid, poses[0])
    depth = np.zeros((len(poses), H, W))
    holes = np.ones((len(poses), H, W), dtype=bool)
    for i, pose in enumerate(poses):
        if same_pose(pose, poses[0]):
            # a float round-trip through world space is not exact for general R
            depth[i] = np.where(valid, d0, 0.0)
            holes[i] = ~valid
        else:
            depth[i], holes[i] = splat_frame(points, src, pose, (H, W), splat_value)
    return WarpedDepthSequence(depth, holes)
