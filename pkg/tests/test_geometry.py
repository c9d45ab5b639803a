import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semfuse.geometry import (
    CameraIntrinsics,
    Pose,
    VoxelGridSpec,
    backproject,
    in_frustum,
    project,
    project_points,
    voxel_center,
)


def test_voxel_center_first_cell():
    spec = VoxelGridSpec(np.zeros(3), 1.0, (2, 2, 2))
    np.testing.assert_array_equal(voxel_center(spec, (0, 0, 0)), [0.5, 0.5, 0.5])


def test_voxel_center_half_size():
    spec = VoxelGridSpec(np.zeros(3), 0.5, (4, 4, 4))
    np.testing.assert_allclose(voxel_center(spec, (2, 0, 0)), [1.25, 0.25, 0.25])


def test_voxel_center_shifted_origin():
    spec = VoxelGridSpec(np.array([-1.0, -1.0, 0.0]), 1.0, (3, 3, 3))
    np.testing.assert_allclose(voxel_center(spec, (1, 1, 1)), [0.5, 0.5, 1.5])


@pytest.mark.parametrize("index", [(2, 0, 0), (-1, 0, 0), (0, 0, 5)])
def test_voxel_center_out_of_range(index):
    spec = VoxelGridSpec(np.zeros(3), 1.0, (2, 2, 2))
    with pytest.raises(IndexError):
        voxel_center(spec, index)


def test_voxel_center_monotone():
    spec = VoxelGridSpec(np.array([0.3, -2.0, 1.0]), 0.1, (5, 6, 7))
    for axis in range(3):
        prev = None
        for i in range(spec.dims[axis]):
            idx = [0, 0, 0]
            idx[axis] = i
            c = voxel_center(spec, idx)[axis]
            assert prev is None or c > prev
            prev = c


def test_project_optical_axis(intr100):
    pixel, z = project(intr100, Pose.identity(), (0, 0, 2))
    np.testing.assert_allclose(pixel, [50, 50])
    assert z == 2.0


def test_project_off_axis(intr100):
    pixel, z = project(intr100, Pose.identity(), (1, 0, 2))
    np.testing.assert_allclose(pixel, [100, 50])
    assert z == 2.0


def test_project_behind_camera(intr100):
    pixel, z = project(intr100, Pose.identity(), (0, 0, -1))
    assert pixel is None and z < 0
    pixel, z = project(intr100, Pose.identity(), (1, 1, 0))
    assert pixel is None


def test_project_points_matches_scalar(intr100):
    pose = Pose.look_at([1.0, -2.0, 1.0], [0.0, 0.0, 0.5])
    pts = np.random.default_rng(0).normal(size=(20, 3))
    u, v, z = project_points(intr100, pose, pts)
    for k, p in enumerate(pts):
        pix, zz = project(intr100, pose, p)
        assert zz == pytest.approx(z[k])
        if pix is None:
            assert np.isnan(u[k])
        else:
            np.testing.assert_allclose([u[k], v[k]], pix)


def test_in_frustum(intr100):
    assert in_frustum(intr100, (50, 50), 2)
    assert not in_frustum(intr100, (-1, 50), 2)
    assert not in_frustum(intr100, (50, 50), -2)
    assert not in_frustum(intr100, (99.6, 50), 2)  # rounds to column 100


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 0, 0, 10, 10)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 10, 0, 10, 10)


def test_pose_validation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(2 * np.eye(3), np.zeros(3))


def test_look_at_centers_target(intr100):
    pose = Pose.look_at([3.0, 1.0, 1.5], [0.0, 0.0, 1.0])
    pixel, z = project(intr100, pose, [0.0, 0.0, 1.0])
    np.testing.assert_allclose(pixel, [50, 50], atol=1e-9)
    assert z == pytest.approx(np.linalg.norm([3.0, 1.0, 0.5]))
    np.testing.assert_allclose(pose.center, [3.0, 1.0, 1.5])


def test_pose_matrix_round_trip():
    pose = Pose.look_at([1.0, 2.0, 3.0], [0.0, 0.5, 0.0])
    back = Pose.from_matrix(pose.matrix())
    np.testing.assert_array_equal(back.rotation, pose.rotation)
    np.testing.assert_array_equal(back.translation, pose.translation)
    np.testing.assert_allclose(pose.compose(pose.inverse()).matrix(), np.eye(4), atol=1e-12)


def _rotation(a, b, c):
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rx = np.array([[1, 0, 0], [0, cc, -sc], [0, sc, cc]])
    return rz @ ry @ rx


angles = st.floats(-np.pi, np.pi)
coords = st.floats(-5, 5)


@settings(max_examples=200, deadline=None)
@given(angles, angles, angles, st.tuples(coords, coords, coords), st.tuples(coords, coords, coords))
def test_project_backproject_round_trip(a, b, c, t, p):
    intr = CameraIntrinsics(80.0, 90.0, 40.0, 30.0, 80, 60)
    pose = Pose(_rotation(a, b, c), np.array(t))
    pc = pose.rotation @ np.array(p) + pose.translation
    if pc[2] <= 0.1:
        return
    pixel, z = project(intr, pose, p)
    np.testing.assert_allclose(backproject(intr, pose, pixel, z), p, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(angles, angles, angles, st.tuples(coords, coords, coords), st.tuples(coords, coords, coords))
def test_identity_composition_is_bitwise_neutral(a, b, c, t, p):
    intr = CameraIntrinsics(80.0, 90.0, 40.0, 30.0, 80, 60)
    pose = Pose(_rotation(a, b, c), np.array(t))
    for composed in (pose.compose(Pose.identity()), Pose.identity().compose(pose)):
        p1, z1 = project(intr, pose, p)
        p2, z2 = project(intr, composed, p)
        assert z1 == z2
        assert (p1 is None and p2 is None) or np.array_equal(p1, p2)
