import json
import subprocess
import sys

import numpy as np
import pytest

from motionforcing import cli, evaluation
from motionforcing.control import write_control
from motionforcing.worldgen import read_frames, read_manifest

WORLD = ["--set", "world.frames=3", "--set", "world.height=16", "--set", "world.width=16"]
MODEL = ["--set", "model.patch=8", "--set", "model.hidden=32", "--set", "model.blocks=1", "--set", "model.heads=2",
         "--set", "schedule.T_max=32", "--set", "train.batch_size=2", "--set", "train.steps=2",
         "--set", "train.heldout=2", "--set", "train.ckpt_every=1", "--set", "train.log_every=1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(WORLD + ["gen-data", "--out", str(root / "data"), "--scenes", "5"]) == 0
    assert cli.main(WORLD + ["--seed", "50", "gen-data", "--eval", "--out", str(root / "eval"), "--scenes", "2"]) == 0
    assert cli.main(MODEL + ["train", "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_gen_data(workspace):
    m = read_manifest(workspace / "data")
    assert len(m["scenes"]) == 5
    assert m["scenes"][0]["frames"] == 3 and m["scenes"][0]["height"] == 16


def test_gen_data_is_seeded(tmp_path, workspace):
    assert cli.main(WORLD + ["gen-data", "--out", str(tmp_path / "again"), "--scenes", "5"]) == 0
    a = read_manifest(workspace / "data")["scenes"]
    b = read_manifest(tmp_path / "again")["scenes"]
    assert [s["checksum"] for s in a] == [s["checksum"] for s in b]


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "checkpoint.pt").exists() and (run / "config.cfg").exists()
    rows = [json.loads(line) for line in open(run / "metrics.jsonl")]
    assert rows[-1]["step"] == 2


def test_warp(workspace, tmp_path):
    scene = workspace / "data" / "scene_00000"
    out = tmp_path / "warped.bin"
    assert cli.main(["warp", "--poses", str(scene / "poses.json"), "--depth", str(scene / "frames.bin"),
                     "--out", str(out)]) == 0
    arrays = read_frames(out)
    assert arrays["depth"].shape == (3, 16, 16, 1)
    first = read_frames(scene / "frames.bin")["depth"][0]
    np.testing.assert_array_equal(arrays["depth"][0], np.where(first > 0, first, 0))


def _sample_args(workspace, out, extra=()):
    scene = workspace / "eval" / "scene_00000"
    control = out.parent / "control.json"
    write_control(control, {0: [[0, 4.0, 8.0, 2.0], [2, 12.0, 8.0, 2.0]]})
    return ["sample", "--checkpoint", str(workspace / "run" / "checkpoint.pt"), "--control", str(control),
            "--poses", str(scene / "poses.json"), "--ref", str(scene / "frames.bin"), "--out", str(out),
            "--steps", "3", *extra]


def test_sample_outputs(workspace, tmp_path):
    out = tmp_path / "s"
    assert cli.main(_sample_args(workspace, out)) == 0
    depth = read_frames(out / "depth.bin")["depth"]
    video = read_frames(out / "video.bin")["appearance"]
    assert depth.shape == (3, 16, 16, 1) and video.shape == (3, 16, 16, 3)
    assert np.isfinite(depth).all() and np.isfinite(video).all()
    assert len(list(out.glob("frame_*.png"))) == 3 and (out / "contact_sheet.png").exists()
    audit = json.loads((out / "audit.json").read_text())
    assert audit["passed"] and audit["calls"] == 6


def test_sample_is_seeded(workspace, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["--seed", "7"] + _sample_args(workspace, a)) == 0
    assert cli.main(["--seed", "7"] + _sample_args(workspace, b)) == 0
    assert (a / "video.bin").read_bytes() == (b / "video.bin").read_bytes()


def test_sample_with_edit(workspace, tmp_path):
    edit = tmp_path / "edit.json"
    edit.write_text(json.dumps([{"op": "delete", "frames": [1, 2], "box": [0, 0, 8, 8], "background": 20.0}]))
    out = tmp_path / "e"
    assert cli.main(_sample_args(workspace, out, ["--edit", str(edit)])) == 0
    assert json.loads((out / "audit.json").read_text())["passed"]


def test_eval_report(workspace, tmp_path):
    out = tmp_path / "ev"
    args = ["eval", "--checkpoint", str(workspace / "run" / "checkpoint.pt"), "--data", str(workspace / "eval"),
            "--out", str(out), "--steps", "2", "--edit-probe"]
    assert cli.main(args) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["schema_version"] == 1 and report["isolation_audit_passed"]
    assert len(report["scenes"]) == 2 and "edit_removed_fraction" in report["aggregate"]
    assert (out / "metrics.png").exists()


def test_eval_exits_nonzero_on_audit_failure(workspace, tmp_path, monkeypatch):
    real = evaluation.evaluate

    def broken(*a, **kw):
        report = real(*a, **kw)
        report.isolation_audit_passed = False
        return report

    monkeypatch.setattr(evaluation, "evaluate", broken)
    args = ["eval", "--checkpoint", str(workspace / "run" / "checkpoint.pt"), "--data", str(workspace / "eval"),
            "--out", str(tmp_path / "ev"), "--steps", "1", "--scenes", "1"]
    assert cli.main(args) == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "motionforcing", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for command in ("gen-data", "train", "sample", "warp", "eval"):
        assert command in out.stdout


def test_bad_override_fails(tmp_path):
    with pytest.raises(KeyError):
        cli.main(["--set", "train.nonsense=1", "gen-data", "--out", str(tmp_path), "--scenes", "1"])
