import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from motionforcing.backbone import ModelConfig
from motionforcing.camera_warp import CameraPose, intrinsics

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TOY_CHECKPOINT = os.environ.get("MF_CHECKPOINT", os.path.join(ROOT, "artifacts", "toy_checkpoint.pt"))
EVAL_DATA = os.environ.get("MF_EVAL_DATA", os.path.join(ROOT, "artifacts", "eval_scenes"))


def rotation(yaw, pitch=0.0, roll=0.0):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return Rz @ Rx @ Ry


def random_pose(rng, size=16, max_angle=0.15, max_shift=0.8):
    R = rotation(*rng.uniform(-max_angle, max_angle, 3))
    t = rng.uniform(-max_shift, max_shift, 3)
    f = rng.uniform(0.8, 1.2) * size
    K = intrinsics(f, size / 2 + rng.uniform(-1, 1), size / 2 + rng.uniform(-1, 1))
    return CameraPose(R, t, K)


def tiny_config(**kw):
    base = dict(frames=2, height=8, width=8, patch=4, channels=3, hidden=32, blocks=1, heads=2,
                mlp_ratio=2, depth_min=0.0, depth_max=20.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
