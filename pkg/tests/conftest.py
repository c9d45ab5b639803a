import numpy as np
import pytest

from semfuse.geometry import CameraIntrinsics, Pose, VoxelGridSpec


@pytest.fixture
def intr100():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)


def single_voxel(z, size=0.01):
    """A one-voxel grid centered on the optical axis of the identity camera."""
    return VoxelGridSpec(np.array([-size / 2, -size / 2, z - size / 2]), size, (1, 1, 1))


def flat_depth(intr, d):
    return np.full(intr.shape, float(d))


def identity():
    return Pose.identity()


# one "criterion N: PASS|FAIL ..." line per acceptance check, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
