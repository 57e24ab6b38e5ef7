import json

import numpy as np
import pytest
import torch

from motionforcing.backbone import ModelConfig, MotionForcingDiT
from motionforcing.control import PointTrackSet
from motionforcing.evaluation import (
    EvalScene, blob_centroids, blob_floor, color_mask, depth_foreground, depth_mae, depth_masks,
    evaluate, nearest_blob, object_present, plot_report, trajectory_adherence, video_masks,
)
from motionforcing.forcing import NoiseSchedule
from motionforcing.worldgen import Scene, WorldConfig, generate_scene, random_scene_spec

EVAL_WORLD = WorldConfig(event_prob=0.0, min_separation=3.0, inside_margin=1.0)


def eval_scene(seed):
    spec = random_scene_spec(seed, EVAL_WORLD)
    return EvalScene.from_scene(Scene(spec, generate_scene(spec)))


def test_blob_centroids_of_squares():
    m = np.zeros((10, 10), dtype=bool)
    m[1:3, 1:3] = True
    m[6:9, 5:8] = True
    blobs = sorted(blob_centroids(m))
    assert blobs == [((1.5, 1.5), 4), ((6.0, 7.0), 9)]
    assert nearest_blob(m, (6, 6)) == (6.0, 7.0)
    assert nearest_blob(m, (6, 6), exclude=[(6.0, 7.5)]) == (1.5, 1.5)
    assert nearest_blob(np.zeros((4, 4), bool), (1, 1)) is None


def test_color_mask_tolerance():
    img = np.zeros((2, 2, 3))
    img[0, 0] = [0.5, 0.5, 0.5]
    img[0, 1] = [0.59, 0.5, 0.45]
    img[1, 0] = [0.62, 0.5, 0.5]
    m = color_mask(img, [0.5, 0.5, 0.5])
    assert m.tolist() == [[True, True], [False, False]]


@pytest.mark.parametrize("seed", range(4))
def test_ground_truth_video_self_consistency(seed):
    s = eval_scene(100 + seed)
    adh = trajectory_adherence(video_masks(s.arrays.appearance, s.colors), s.arrays.tracks)
    for a in adh.values():
        assert a["missing"] == 0
        assert a["mean_px"] < 1.0


@pytest.mark.parametrize("seed", range(4))
def test_ground_truth_depth_self_consistency(seed):
    s = eval_scene(200 + seed)
    masks = depth_masks(s.arrays.depth, s.background, s.background_valid, s.arrays.tracks.ids)
    adh = trajectory_adherence(masks, s.arrays.tracks)
    for a in adh.values():
        assert a["mean_px"] < 1.0
    valid = s.arrays.depth > 0
    assert depth_mae(s.arrays.depth, s.arrays.depth, valid) < 1e-4


def test_shifted_tracks_score_the_offset():
    s = eval_scene(300)
    shifted = PointTrackSet(s.arrays.tracks.frames, {
        oid: [(x + 5.0, y, r) for x, y, r in entries] for oid, entries in s.arrays.tracks.tracks.items()
    })
    adh = trajectory_adherence(video_masks(s.arrays.appearance, s.colors), shifted)
    for a in adh.values():
        assert abs(a["mean_px"] - 5.0) <= 1.0


def test_missing_blob_scores_diagonal():
    tracks = PointTrackSet.from_items(2, [(0, [(4.0, 4.0, 2.0), (4.0, 4.0, 2.0)])])
    masks = {0: np.zeros((2, 16, 16), dtype=bool)}
    a = trajectory_adherence(masks, tracks)[0]
    assert a["missing"] == 2
    assert a["mean_px"] == pytest.approx(np.hypot(16, 16))


def test_depth_foreground_over_sky_and_ground():
    bg = np.array([[0.0, 10.0, 10.0]])
    bgv = np.array([[False, True, True]])
    d = np.array([[6.0, 6.0, 9.8]])
    assert depth_foreground(d, bg, bgv).tolist() == [[True, True, False]]


def test_object_present():
    img = np.zeros((16, 16, 3))
    img[6:10, 6:10] = [1.0, 0.0, 0.0]
    assert object_present(img, [1, 0, 0], (7.5, 7.5), 2.0)
    assert not object_present(img, [0, 1, 0], (7.5, 7.5), 2.0)
    assert not object_present(img, [1, 0, 0], (1.0, 14.0), 2.0)


def test_report_schema_and_determinism(tmp_path):
    # an untrained model still has to produce a well-formed, reproducible report
    scenes = [eval_scene(400 + i) for i in range(2)]
    cfg = ModelConfig(patch=16, hidden=32, blocks=1, heads=2, depth_max=30.0, T_max=32)
    torch.manual_seed(0)
    model = MotionForcingDiT(cfg).eval()
    sched = NoiseSchedule(32)
    r1 = evaluate(model, sched, cfg.codec(), scenes, steps=2, seed=0)
    r2 = evaluate(model, sched, cfg.codec(), scenes, steps=2, seed=0)
    assert r1.to_json() == r2.to_json()
    assert r1.schema_version == 1 and r1.isolation_audit_passed
    for row in r1.scenes:
        assert row["depth_mae"] >= 0 and row["adherence_px"] >= 0
    r1.write(tmp_path / "report.json")
    assert json.loads((tmp_path / "report.json").read_text())["schema_version"] == 1
    plot_report(r1, tmp_path / "metrics.png")
    assert (tmp_path / "metrics.png").stat().st_size > 1000


def test_speckle_is_not_a_blob():
    tracks = PointTrackSet.from_items(1, [(0, [(20.0, 20.0, 4.0)])])
    m = np.zeros((1, 40, 40), dtype=bool)
    m[0, 21:23, 21:23] = True  # 4 px next to the control point
    m[0, 8:15, 28:35] = True  # 49 px disc-sized blob further away
    a = trajectory_adherence({0: m}, tracks)[0]
    assert a["mean_px"] == pytest.approx(np.hypot(31 - 20, 11 - 20))
    assert blob_floor(4.0) == 13 and blob_floor(0.5) == 3
