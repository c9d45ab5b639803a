"""Pinhole cameras, rigid poses and regular voxel grids.

Poses are camera-from-world: ``p_cam = R @ p_world + t``. Volumes are indexed
``[x, y, z]`` in memory; on disk they are written x-fastest (see ``semfuse.io``).
"""

from __future__ import annotations

import dataclasses

import numpy as np


@dataclasses.dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera parameters (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclasses.dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-from-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant 1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
        """Camera at ``eye`` looking at ``target``; image y axis points down."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(rot, -rot @ eye)

    def compose(self, other: Pose) -> Pose:
        """``self`` applied after ``other``."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])


@dataclasses.dataclass(frozen=True, eq=False)
class VoxelGridSpec:
    """Regular axis-aligned voxel grid anchored at its minimum corner."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(
            self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3)
        )
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive integers")

    def __eq__(self, other):
        if not isinstance(other, VoxelGridSpec):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.voxel_size == other.voxel_size
            and np.array_equal(self.origin, other.origin)
        )

    def __hash__(self):
        return hash((self.dims, self.voxel_size, tuple(self.origin)))

    @property
    def num_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def centers(self) -> np.ndarray:
        """World coordinates of every voxel center, shape ``(nx, ny, nz, 3)``."""
        axes = [
            self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size
            for a in range(3)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def index_of(self, point) -> tuple[int, int, int]:
        """Index of the voxel containing ``point`` (may lie outside the grid)."""
        idx = np.floor((np.asarray(point, dtype=np.float64) - self.origin) / self.voxel_size)
        return tuple(int(i) for i in idx)

    def contains(self, index) -> bool:
        return all(0 <= int(i) < d for i, d in zip(index, self.dims))

    def crop(self, corner, size) -> VoxelGridSpec:
        corner = np.asarray(corner)
        return VoxelGridSpec(
            self.origin + corner * self.voxel_size, self.voxel_size, tuple(size)
        )


def voxel_center(spec: VoxelGridSpec, index) -> np.ndarray:
    """World position of the center of voxel ``index``."""
    if len(index) != 3 or not spec.contains(index):
        raise IndexError(f"voxel index {tuple(index)} outside grid {spec.dims}")
    return spec.origin + (np.asarray(index, dtype=np.float64) + 0.5) * spec.voxel_size


def project(intr: CameraIntrinsics, pose: Pose, point):
    """Project a world point.

    Returns ``(pixel, cam_depth)``. ``pixel`` is ``None`` when the point is
    behind the camera (``cam_depth <= 0``).
    """
    pc = pose.rotation @ np.asarray(point, dtype=np.float64) + pose.translation
    z = pc[2]
    if z <= 0:
        return None, float(z)
    pixel = np.array([intr.fx * pc[0] / z + intr.cx, intr.fy * pc[1] / z + intr.cy])
    return pixel, float(z)


def project_points(intr: CameraIntrinsics, pose: Pose, points: np.ndarray):
    """Vectorized ``project`` over ``(..., 3)`` points.

    Returns ``(u, v, z)``; ``u`` and ``v`` are NaN where ``z <= 0``.
    """
    pc = points @ pose.rotation.T + pose.translation
    z = pc[..., 2]
    front = z > 0
    safe = np.where(front, z, 1.0)
    u = np.where(front, intr.fx * pc[..., 0] / safe + intr.cx, np.nan)
    v = np.where(front, intr.fy * pc[..., 1] / safe + intr.cy, np.nan)
    return u, v, z


def in_frustum(intr: CameraIntrinsics, pixel, cam_depth) -> bool:
    if pixel is None or not cam_depth > 0:
        return False
    col, row = np.rint(pixel[0]), np.rint(pixel[1])
    return bool(0 <= col < intr.width and 0 <= row < intr.height)


def pixel_lookup(intr: CameraIntrinsics, u, v, z):
    """Nearest-pixel indices for projected points.

    Returns ``(rows, cols, mask)``; entries outside the mask are set to 0.
    """
    with np.errstate(invalid="ignore"):
        cols = np.rint(u)
        rows = np.rint(v)
        mask = (z > 0) & (cols >= 0) & (cols < intr.width) & (rows >= 0) & (rows < intr.height)
    cols = np.where(mask, cols, 0).astype(np.intp)
    rows = np.where(mask, rows, 0).astype(np.intp)
    return rows, cols, mask


def backproject(intr: CameraIntrinsics, pose: Pose, pixel, cam_depth) -> np.ndarray:
    """Inverse of ``project`` for a point at z-depth ``cam_depth``."""
    x = (pixel[0] - intr.cx) / intr.fx * cam_depth
    y = (pixel[1] - intr.cy) / intr.fy * cam_depth
    pc = np.array([x, y, cam_depth])
    return pose.rotation.T @ (pc - pose.translation)


def camera_rays(intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z, shape ``(H, W, 3)``."""
    cols, rows = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    return np.stack(
        [(cols - intr.cx) / intr.fx, (rows - intr.cy) / intr.fy, np.ones(cols.shape)],
        axis=-1,
    )
