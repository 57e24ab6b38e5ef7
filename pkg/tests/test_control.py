import numpy as np
import pytest
from hypothesis import given, strategies as st

from motionforcing.control import (
    PALETTE, PointTrackSet, color, interpolate_track, modulate_velocity, rasterize_points,
    read_control, write_control,
)
from oracles import disc_pixel_count


def one(frames, oid, entry):
    return PointTrackSet.from_items(frames, [(oid, [entry] * frames)])


def test_empty_canvas():
    canvas = rasterize_points(PointTrackSet(3), (3, 16, 16))
    assert canvas.shape == (3, 16, 16, 3)
    assert not canvas.any()


def test_single_disc_area_and_color():
    canvas = rasterize_points(one(1, 5, (32.0, 32.0, 10.0)), (1, 64, 64))
    mask = canvas[0].any(-1)
    oracle = disc_pixel_count(32.0, 32.0, 10.0, 64, 64)
    assert mask.sum() == oracle
    assert abs(mask.sum() - np.pi * 100) / (np.pi * 100) < 0.05
    assert np.array_equal(canvas[0][mask], np.broadcast_to(color(5), (mask.sum(), 3)))
    assert (canvas[0][~mask] == 0).all()


def test_smaller_disc_on_top():
    tracks = PointTrackSet.from_items(1, [(0, [(16.0, 16.0, 10.0)]), (1, [(16.0, 16.0, 5.0)])])
    canvas = rasterize_points(tracks, (1, 32, 32))
    assert np.array_equal(canvas[0, 16, 16], color(1))
    assert np.array_equal(canvas[0, 16, 24], color(0))
    # order of insertion does not matter
    swapped = PointTrackSet.from_items(1, [(1, [(16.0, 16.0, 5.0)]), (0, [(16.0, 16.0, 10.0)])])
    assert np.array_equal(rasterize_points(swapped, (1, 32, 32)), canvas)


def test_clipped_disc_drawn():
    canvas = rasterize_points(one(1, 0, (-3.0, 8.0, 5.0)), (1, 16, 16))
    assert canvas[0, 8, 0].any()
    assert canvas[0, :, 3:].sum() == 0


def test_nonpositive_radius_rejected():
    with pytest.raises(ValueError):
        one(1, 0, (1.0, 1.0, 0.0))


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        PointTrackSet.from_items(1, [(3, [(1, 1, 1)]), (3, [(2, 2, 1)])])


def test_frame_count_mismatch():
    with pytest.raises(ValueError):
        rasterize_points(one(2, 0, (1, 1, 1)), (3, 8, 8))


def test_palette_injective_and_stable():
    colors = {tuple(color(i).tolist()) for i in range(64)}
    assert len(colors) == 64
    assert (PALETTE.sum(1) >= 0.5).all()
    assert np.array_equal(color(3), color(3 + 64 * 5))  # hash wraps over the palette


@given(st.integers(0, 3), st.floats(4, 28), st.floats(4, 28), st.floats(1, 6))
def test_removal_only_changes_footprint(drop, x, y, r):
    entries = [(0, [(x, y, r)]), (1, [(20.0, 10.0, 4.0)]), (2, [(8.0, 22.0, 3.0)]), (3, [(x + 2, y - 1, 2.0)])]
    full = rasterize_points(PointTrackSet.from_items(1, entries), (1, 32, 32))
    reduced = PointTrackSet.from_items(1, entries).without(drop)
    part = rasterize_points(reduced, (1, 32, 32))
    ex, ey, er = dict(entries)[drop][0]
    v, u = np.mgrid[0:32, 0:32]
    footprint = (u - ex) ** 2 + (v - ey) ** 2 <= er * er
    diff = (full[0] != part[0]).any(-1)
    assert not (diff & ~footprint).any()


def test_interpolate_examples():
    xs = [e[0] for e in interpolate_track([(0, 0, 0, 5), (4, 8, 0, 5)], 5)]
    assert xs == [0, 2, 4, 6, 8]
    assert interpolate_track([(0, 3, 4, 2), (4, 3, 4, 2)], 5) == [(3.0, 4.0, 2.0)] * 5
    # piecewise: frames 2..4 go from x=2 to x=8, so frame 3 is 5
    assert interpolate_track([(0, 0, 0, 4), (2, 2, 0, 4), (4, 8, 0, 4)], 5)[3][0] == 5.0


def test_interpolate_holds_outside_span():
    tr = interpolate_track([(2, 1, 1, 1), (3, 3, 1, 1)], 6)
    assert [e[0] for e in tr] == [1, 1, 1, 3, 3, 3]


@pytest.mark.parametrize("kps", [
    [(0, 0, 0, 1)],
    [(0, 0, 0, 1), (0, 1, 0, 1)],
    [(0, 0, 0, 1), (5, 1, 0, 1)],
    [(-1, 0, 0, 1), (2, 1, 0, 1)],
    [(2, 0, 0, 1), (1, 1, 0, 1)],
])
def test_interpolate_rejects(kps):
    with pytest.raises(ValueError):
        interpolate_track(kps, 5)


@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 20)), min_size=2, max_size=6))
def test_interpolate_hits_keypoints(points):
    frames = 2 * len(points)
    kps = [(2 * i, *p) for i, p in enumerate(points)]
    tr = interpolate_track(kps, frames)
    for f, x, y, r in kps:
        assert tr[f] == (x, y, r)


def test_modulate_examples():
    track = [(float(i), 0.0, 2.0) for i in range(5)]
    assert modulate_velocity(track, [1.0] * 4) == track
    assert modulate_velocity(track, [2.0] * 4)[-1][:2] == (8.0, 0.0)
    assert [e[0] for e in modulate_velocity(track, [1, 0, 0, 1])] == [0, 1, 1, 1, 2]


def test_modulate_rejects():
    track = [(float(i), 0.0, 2.0) for i in range(5)]
    with pytest.raises(ValueError):
        modulate_velocity(track, [1, -1, 1, 1])
    with pytest.raises(ValueError):
        modulate_velocity(track, [1, 1, 1])
    shrinking = [(0.0, 0.0, 2.0), (0.0, 0.0, 1.0)]
    with pytest.raises(ValueError, match="radius"):
        modulate_velocity(shrinking, [3.0])


def test_control_file_roundtrip(tmp_path):
    path = tmp_path / "control.json"
    write_control(path, {4: [(0, 10, 10, 3), (8, 30, 10, 3)]})
    tracks = read_control(path, 9)
    assert tracks.ids == [4]
    assert tracks.tracks[4][4] == (20.0, 10.0, 3.0)
