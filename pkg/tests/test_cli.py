import json

import numpy as np
import pytest

from semfuse.cli import main
from semfuse.pipeline import io
from semfuse.simdata import Box, Scene, ground_truth

SMALL_SCENE = {
    "size": [3.2, 3.2, 2.4],
    "voxel_size": 0.2,
    "wall_thickness": 0.4,
    "boxes": [
        {"label": "table", "min": [1.2, 1.2, 0.4], "max": [2.0, 2.0, 1.0]},
        {"label": "box", "min": [0.6, 2.2, 0.4], "max": [1.0, 2.6, 0.8]},
    ],
    "camera": {"fx": 30.0, "fy": 30.0, "cx": 19.5, "cy": 14.5, "width": 40, "height": 30},
    "trajectory": {"views": 6, "seed": 1},
    "truncation": 0.6,
}
CONFIG = {"hidden_widths": [8, 4], "crop": 8, "batch_size": 2, "solver": {"iterations": 3}, "lr": 1e-3}


def run_pipeline(root):
    (root / "scene.json").write_text(json.dumps(SMALL_SCENE))
    (root / "config.json").write_text(json.dumps(CONFIG))
    steps = [
        ["simulate", "--scene", str(root / "scene.json"), "--out", str(root / "sim"), "--seed", "3"],
        ["fuse", "--input", str(root / "sim"), "--out", str(root / "fused"), "--seed", "3"],
        ["train", "--input", str(root / "fused"), "--config", str(root / "config.json"),
         "--epochs", "2", "--out", str(root / "run"), "--seed", "3"],
        ["reconstruct", "--input", str(root / "fused"), "--checkpoint", str(root / "run" / "model.ckpt"),
         "--iterations", "10", "--out", str(root / "pred.vol"), "--seed", "3"],
        ["eval", "--input", str(root / "pred.vol"), "--gt", str(root / "fused" / "gt.vol"),
         "--out", str(root / "report.txt"), "--seed", "3"],
        ["export", "--input", str(root / "pred.vol"), "--out", str(root / "pred.ply"), "--seed", "3"],
    ]  # fmt: skip
    for argv in steps:
        assert main(argv) == 0, argv
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    a = tmp_path_factory.mktemp("a")
    b = tmp_path_factory.mktemp("b")
    return run_pipeline(a), run_pipeline(b)


def test_pipeline_artifacts_are_byte_identical(two_runs):
    first, second = two_runs
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], name


def test_pipeline_outputs(two_runs):
    files, _ = two_runs
    names = {str(p) for p in files}
    for expected in ("sim/gt.vol", "sim/kinect/depth.npy", "fused/kinect.tsdf.vol", "fused/noisy_kinect.datacost.vol",
                     "run/model.ckpt", "run/loss.txt", "pred.vol", "report.txt", "pred.ply"):  # fmt: skip
        assert expected in names
    loss_rows = files[next(p for p in files if str(p) == "run/loss.txt")].decode().splitlines()
    assert loss_rows[0].split() == ["epoch", "loss", "loss_s", "loss_f", "sigma", "tau"]
    assert len(loss_rows) == 3
    report = files[next(p for p in files if str(p) == "report.txt")].decode()
    assert "semantic_accuracy:" in report and "free_space_accuracy:" in report


def test_eval_identical_is_perfect(tmp_path, capsys):
    scene = Scene(size=(1.0, 1.0, 1.0), voxel_size=0.1, wall_thickness=0.2,
                  boxes=[Box("box", (0.4, 0.4, 0.2), (0.6, 0.6, 0.4))])  # fmt: skip
    gt = ground_truth(scene)
    vol = io.VolumeFile("labels", scene.spec, gt, scene.labels)
    io.save_volume(tmp_path / "gt.vol", vol)
    io.save_volume(tmp_path / "pred.vol", io.VolumeFile("labels", scene.spec, np.maximum(gt, 0), scene.labels))
    assert main(["eval", "--input", str(tmp_path / "pred.vol"), "--gt", str(tmp_path / "gt.vol")]) == 0
    out = capsys.readouterr().out
    assert "semantic_accuracy: 1.000000" in out
    assert "free_space_accuracy: 1.000000" in out


def test_missing_input_is_an_error(tmp_path, capsys):
    code = main(["eval", "--input", str(tmp_path / "nope.vol"), "--gt", str(tmp_path / "gt.vol")])
    assert code != 0
    assert "nope.vol" in capsys.readouterr().err


def test_corrupt_volume_is_an_error(tmp_path, capsys):
    (tmp_path / "bad.vol").write_bytes(b"garbage")
    assert main(["export", "--input", str(tmp_path / "bad.vol"), "--out", str(tmp_path / "x.ply")]) != 0
    assert "offset" in capsys.readouterr().err


def test_unknown_flag_exits_nonzero():
    with pytest.raises(SystemExit) as err:
        main(["eval", "--bogus"])
    assert err.value.code != 0


def test_reconstruct_without_checkpoint(tmp_path):
    root = tmp_path
    (root / "scene.json").write_text(json.dumps(SMALL_SCENE))
    assert main(["simulate", "--scene", str(root / "scene.json"), "--out", str(root / "sim")]) == 0
    assert main(["fuse", "--input", str(root / "sim"), "--out", str(root / "fused")]) == 0
    assert main(["reconstruct", "--input", str(root / "fused"), "--iterations", "20", "--out", str(root / "p.vol")]) == 0
    pred = io.load_volume(root / "p.vol")
    assert pred.kind == "labels" and pred.data.shape[1:] == (16, 16, 12)
