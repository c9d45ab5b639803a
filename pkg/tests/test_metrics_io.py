import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semfuse.geometry import VoxelGridSpec
from semfuse.pipeline.io import (
    CONFIG_SCHEMA,
    SCENE_SCHEMA,
    FormatError,
    UnsupportedVersionError,
    VolumeFile,
    export_ply,
    load_checkpoint,
    load_volume,
    read_document,
    save_checkpoint,
    save_volume,
    write_document,
)
from semfuse.pipeline.metrics import (
    completion_tp_rate,
    confusion,
    evaluate,
    free_space_accuracy,
    mean_surface_distance,
    semantic_accuracy,
)
from semfuse.simdata import ground_truth, random_scene

# --- metrics -------------------------------------------------------------------


def test_semantic_accuracy_examples():
    gt = np.array([1, 2, 2, 3, 0, -1]).reshape(6, 1, 1)
    assert semantic_accuracy(gt.copy(), gt) == 1.0
    pred = np.array([1, 2, 1, 3, 0, 0]).reshape(6, 1, 1)
    assert semantic_accuracy(pred, gt) == 0.75
    wrong = np.array([2, 1, 1, 1, 0, 0]).reshape(6, 1, 1)
    assert semantic_accuracy(wrong, gt) == 0.0
    assert semantic_accuracy(gt, np.zeros_like(gt)) is None


def test_free_space_accuracy_examples():
    gt = np.array([0, 0, 0, 0, 1, -1]).reshape(6, 1, 1)
    assert free_space_accuracy(gt.copy(), gt) == 1.0
    assert free_space_accuracy(np.array([1, 1, 0, 0, 1, 1]).reshape(6, 1, 1), gt) == 0.5
    assert free_space_accuracy(np.full_like(gt, 2), gt) == 0.0


def test_completion_tp_rate_examples():
    gt = np.array([1, 1, 2, 2, 0, -1]).reshape(6, 1, 1)
    assert completion_tp_rate(gt.copy(), gt) == 1.0
    assert completion_tp_rate(np.zeros_like(gt), gt) == 0.0
    # wrong occupied labels still count as completed
    assert completion_tp_rate(np.array([2, 0, 1, 0, 0, 0]).reshape(6, 1, 1), gt) == 0.5


def test_unknown_voxels_never_counted():
    gt = np.array([1, 0, -1, -1]).reshape(4, 1, 1)
    a = np.array([1, 0, 0, 0]).reshape(4, 1, 1)
    b = np.array([1, 0, 3, 1]).reshape(4, 1, 1)
    assert semantic_accuracy(a, gt) == semantic_accuracy(b, gt) == 1.0
    assert free_space_accuracy(a, gt) == free_space_accuracy(b, gt) == 1.0


def test_surface_distance_plane_shift():
    gt = np.zeros((10, 10, 10), dtype=int)
    gt[:, :, :3] = 1
    assert mean_surface_distance(gt, gt) == 0.0
    pred = np.zeros_like(gt)
    pred[:, :, :5] = 1
    assert mean_surface_distance(pred, gt) == 2.0


def test_surface_distance_single_voxel_and_empty():
    one = np.zeros((3, 3, 3), dtype=int)
    one[1, 1, 1] = 2
    assert mean_surface_distance(one, one) == 0.0
    assert mean_surface_distance(np.zeros_like(one), one) is None


def test_shape_mismatch():
    with pytest.raises(ValueError):
        semantic_accuracy(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_report_on_self_is_perfect():
    scene = random_scene(0)
    labels = ground_truth(scene)
    pred = np.where(labels < 0, 0, labels)
    report = evaluate(pred, labels, scene.labels)
    assert report.semantic_accuracy == 1.0
    assert report.free_space_accuracy == 1.0
    assert report.completion_tp_rate == 1.0
    assert report.mean_surface_distance is not None
    text = report.to_text()
    for key in ("semantic_accuracy: 1.000000", "free_space_accuracy: 1.000000", "completion_tp_rate:", "mean_surface_distance:"):
        assert key in text
    assert np.trace(report.confusion) == report.confusion.sum()


def test_confusion_counts():
    gt = np.array([0, 1, 1, -1]).reshape(4, 1, 1)
    pred = np.array([0, 1, 2, 2]).reshape(4, 1, 1)
    np.testing.assert_array_equal(confusion(pred, gt, 3), [[1, 0, 0], [0, 1, 1], [0, 0, 0]])


# --- volume files ----------------------------------------------------------------


def sample_volume(channels=2, dims=(3, 4, 5)):
    spec = VoxelGridSpec(np.array([0.5, -1.0, 2.0]), 0.1, dims)
    data = np.random.default_rng(0).normal(size=(channels,) + dims).astype(np.float32)
    return VolumeFile("datacost", spec, data, tuple(f"l{i}" for i in range(channels)))


def test_volume_round_trip(tmp_path):
    vol = sample_volume()
    path = tmp_path / "v.vol"
    save_volume(path, vol)
    back = load_volume(path)
    assert back.kind == vol.kind and back.names == vol.names and back.spec == vol.spec
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.to_bytes() == vol.to_bytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)), st.integers(0, 10**6))
def test_volume_round_trip_property(channels, dims, seed):
    spec = VoxelGridSpec(np.zeros(3), 0.25, dims)
    data = np.random.default_rng(seed).normal(size=(channels,) + dims).astype(np.float32)
    vol = VolumeFile("features", spec, data)
    assert VolumeFile.from_bytes(vol.to_bytes()).data.tobytes() == data.tobytes()


def test_volume_layout_is_x_fastest():
    spec = VoxelGridSpec(np.zeros(3), 1.0, (2, 3, 1))
    data = np.arange(6, dtype=np.float32).reshape(2, 3, 1)
    buf = VolumeFile("labels", spec, data).to_bytes()
    payload = np.frombuffer(buf[60:], dtype="<f4")
    np.testing.assert_array_equal(payload, [0, 3, 1, 4, 2, 5])
    assert struct.unpack_from("<H", buf, 4)[0] == 1


def test_volume_bad_magic():
    buf = bytearray(sample_volume().to_bytes())
    buf[0:4] = b"XXXX"
    with pytest.raises(FormatError) as err:
        VolumeFile.from_bytes(bytes(buf))
    assert err.value.offset == 0


def test_volume_version_plus_one():
    buf = bytearray(sample_volume().to_bytes())
    struct.pack_into("<H", buf, 4, 2)
    with pytest.raises(UnsupportedVersionError) as err:
        VolumeFile.from_bytes(bytes(buf))
    assert err.value.offset == 4


def test_volume_truncated_and_trailing():
    buf = sample_volume().to_bytes()
    with pytest.raises(FormatError, match="offset"):
        VolumeFile.from_bytes(buf[:-3])
    with pytest.raises(FormatError):
        VolumeFile.from_bytes(buf[:30])
    with pytest.raises(FormatError):
        VolumeFile.from_bytes(buf + b"\0")


# --- checkpoints and documents ---------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "s": np.array(0.25), "w": np.random.default_rng(0).normal(size=(4, 1))}
    meta = {"epoch": 3, "config": {"lr": 1e-4}}
    save_checkpoint(tmp_path / "m.ckpt", arrays, meta)
    back, meta2 = load_checkpoint(tmp_path / "m.ckpt")
    assert meta2 == meta and list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape and back[k].tobytes() == arrays[k].tobytes()
    save_checkpoint(tmp_path / "n.ckpt", arrays, meta)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"nope")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_scene_document_schema(tmp_path):
    doc = random_scene(0).to_dict()
    write_document(tmp_path / "s.json", doc)
    assert read_document(tmp_path / "s.json", SCENE_SCHEMA) == doc
    doc["colour"] = "red"
    write_document(tmp_path / "bad.json", doc)
    with pytest.raises(Exception, match="colour"):
        read_document(tmp_path / "bad.json", SCENE_SCHEMA)


def test_config_document_schema(tmp_path):
    write_document(tmp_path / "c.json", {"lr": 1e-3, "epochs": 2, "solver": {"iterations": 10}})
    assert read_document(tmp_path / "c.json", CONFIG_SCHEMA)["epochs"] == 2
    write_document(tmp_path / "bad.json", {"lr": "fast"})
    with pytest.raises(Exception):
        read_document(tmp_path / "bad.json", CONFIG_SCHEMA)


# --- PLY -------------------------------------------------------------------------


def ply_counts(path):
    head = path.read_text().split("end_header\n")[0]
    nv = int(head.split("element vertex ")[1].split("\n")[0])
    nf = int(head.split("element face ")[1].split("\n")[0])
    return nv, nf, path.read_text().split("end_header\n")[1]


def test_ply_single_voxel(tmp_path):
    vol = np.zeros((3, 3, 3), dtype=int)
    vol[1, 1, 1] = 2
    spec = VoxelGridSpec(np.zeros(3), 0.1, (3, 3, 3))
    assert export_ply(tmp_path / "a.ply", vol, spec) == (8, 12)
    nv, nf, body = ply_counts(tmp_path / "a.ply")
    assert (nv, nf) == (8, 12)
    assert len(body.strip().splitlines()) == 20


def test_ply_two_adjacent_voxels_no_dedup(tmp_path):
    vol = np.zeros((3, 3, 3), dtype=int)
    vol[0, 0, 0] = vol[1, 0, 0] = 1
    spec = VoxelGridSpec(np.zeros(3), 0.1, (3, 3, 3))
    assert export_ply(tmp_path / "b.ply", vol, spec) == (16, 24)


def test_ply_empty_is_header_only(tmp_path):
    spec = VoxelGridSpec(np.zeros(3), 0.1, (2, 2, 2))
    assert export_ply(tmp_path / "c.ply", np.zeros((2, 2, 2)), spec) == (0, 0)
    assert (tmp_path / "c.ply").read_text().endswith("end_header\n")


def test_ply_is_deterministic(tmp_path):
    vol = np.random.default_rng(0).integers(0, 4, (4, 4, 4))
    spec = VoxelGridSpec(np.zeros(3), 0.1, (4, 4, 4))
    export_ply(tmp_path / "a.ply", vol, spec)
    export_ply(tmp_path / "b.ply", vol, spec)
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()
