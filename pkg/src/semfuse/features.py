"""Per-voxel, per-sensor confidence features.

Each voxel is projected into every view of a sensor; views whose measurement
lies within the truncation band of the voxel contribute their pixel features,
which are then averaged. Feature layout (``m = 13`` for stereo sensors,
``m = 11`` otherwise)::

    [0:9]   3x3 depth patch, row-major
    [9]     mean of image gradient norm on a 3x3 patch
    [10]    standard deviation of image gradient norm on a 3x3 patch
    [11]    mean of stereo 5x5 NCC over contributing views
    [12]    standard deviation of stereo 5x5 NCC over contributing views
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .geometry import CameraIntrinsics, Pose, VoxelGridSpec, pixel_lookup, project_points

N_DEPTH = 9
N_MONO = 11
N_STEREO = 13
NCC_VAR_EPS = 1e-12


@dataclasses.dataclass
class SensorView:
    """One frame of one sensor: depth plus the images features are read from."""

    depth: np.ndarray
    image: np.ndarray
    intr: CameraIntrinsics
    pose: Pose
    semantics: np.ndarray | None = None
    right_image: np.ndarray | None = None
    baseline: float = 0.0
    outliers: np.ndarray | None = None

    @property
    def stereo(self) -> bool:
        return self.right_image is not None


@dataclasses.dataclass
class FeatureVolume:
    """``features`` has shape ``(m, nx, ny, nz)``; ``count`` is the number of views."""

    spec: VoxelGridSpec
    sensor: str
    features: np.ndarray
    count: np.ndarray

    @property
    def dim(self) -> int:
        return self.features.shape[0]

    def as_rows(self) -> np.ndarray:
        """Feature matrix with one row per voxel (C order over ``x, y, z``)."""
        return self.features.reshape(self.dim, -1).T


def _clamped(idx, n):
    return np.clip(idx, 0, n - 1)


_OFFSETS_3 = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]
_OFFSETS_5 = [(dr, dc) for dr in range(-2, 3) for dc in range(-2, 3)]


def depth_patch(depth: np.ndarray, pixel) -> np.ndarray | None:
    """3x3 depth neighborhood of ``pixel = (col, row)``.

    Neighbors outside the image or without a measurement take the center value.
    Returns ``None`` when the center itself has no measurement.
    """
    col, row = int(pixel[0]), int(pixel[1])
    h, w = depth.shape
    center = depth[row, col]
    if not center > 0:
        return None
    out = np.empty(N_DEPTH)
    for k, (dr, dc) in enumerate(_OFFSETS_3):
        r, c = row + dr, col + dc
        inside = 0 <= r < h and 0 <= c < w
        out[k] = depth[r, c] if inside and depth[r, c] > 0 else center
    return out


def depth_patches(depth: np.ndarray) -> np.ndarray:
    """``depth_patch`` at every pixel, shape ``(H, W, 9)``."""
    h, w = depth.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty((h, w, N_DEPTH))
    for k, (dr, dc) in enumerate(_OFFSETS_3):
        r, c = rows + dr, cols + dc
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        nb = depth[_clamped(r, h), _clamped(c, w)]
        out[..., k] = np.where(inside & (nb > 0), nb, depth)
    return out


def gradient_norm(image: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude with clamped borders."""
    h, w = image.shape
    c = np.arange(w)
    r = np.arange(h)
    gx = (image[:, _clamped(c + 1, w)] - image[:, _clamped(c - 1, w)]) / 2.0
    gy = (image[_clamped(r + 1, h), :] - image[_clamped(r - 1, h), :]) / 2.0
    return np.sqrt(gx * gx + gy * gy)


def _patch_stats(values: np.ndarray):
    h, w = values.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    stack = np.stack(
        [values[_clamped(rows + dr, h), _clamped(cols + dc, w)] for dr, dc in _OFFSETS_3]
    )
    return stack.mean(axis=0), stack.std(axis=0)


def grad_stats(image: np.ndarray, pixel) -> tuple[float, float]:
    """Mean and population std of gradient norms on the 3x3 patch at ``(col, row)``."""
    mean, std = grad_stats_image(image)
    col, row = int(pixel[0]), int(pixel[1])
    return float(mean[row, col]), float(std[row, col])


def grad_stats_image(image: np.ndarray):
    return _patch_stats(gradient_norm(np.asarray(image, dtype=np.float64)))


def ncc(patch_a, patch_b) -> float:
    """Normalized cross correlation; 0 if either patch is (numerically) constant."""
    a = np.asarray(patch_a, dtype=np.float64).ravel()
    b = np.asarray(patch_b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    va = np.dot(a, a)
    vb = np.dot(b, b)
    if va < NCC_VAR_EPS or vb < NCC_VAR_EPS:
        return 0.0
    return float(np.clip(np.dot(a, b) / np.sqrt(va * vb), -1.0, 1.0))


def stereo_ncc_image(view: SensorView):
    """Per-pixel NCC between the left 5x5 patch and the right patch it matches.

    The right patch is centered at the disparity implied by the measured depth.
    Returns ``(ncc, has_sample)``; pixels whose patches leave the image or whose
    depth is missing have no sample.
    """
    left = np.asarray(view.image, dtype=np.float64)
    right = np.asarray(view.right_image, dtype=np.float64)
    h, w = left.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    depth = view.depth
    has = depth > 0
    disp = np.where(has, view.intr.fx * view.baseline / np.where(has, depth, 1.0), 0.0)
    rcols = np.rint(cols - disp).astype(np.intp)
    has &= (rows >= 2) & (rows < h - 2) & (cols >= 2) & (cols < w - 2)
    has &= (rcols >= 2) & (rcols < w - 2)
    a = np.stack([left[_clamped(rows + dr, h), _clamped(cols + dc, w)] for dr, dc in _OFFSETS_5])
    b = np.stack([right[_clamped(rows + dr, h), _clamped(rcols + dc, w)] for dr, dc in _OFFSETS_5])
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    va = np.sum(a * a, axis=0)
    vb = np.sum(b * b, axis=0)
    ok = (va >= NCC_VAR_EPS) & (vb >= NCC_VAR_EPS)
    out = np.where(ok, np.sum(a * b, axis=0) / np.sqrt(np.where(ok, va * vb, 1.0)), 0.0)
    return np.clip(out, -1.0, 1.0), has


def _patch_contains(mask: np.ndarray) -> np.ndarray:
    """Pixels whose 3x3 neighborhood contains a flagged pixel."""
    h, w = mask.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    hit = np.zeros_like(mask, dtype=bool)
    for dr, dc in _OFFSETS_3:
        r, c = rows + dr, cols + dc
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        hit |= inside & mask[_clamped(r, h), _clamped(c, w)]
    return hit


def _view_key(view: SensorView):
    return (tuple(view.pose.matrix().ravel()), view.depth.tobytes())


def extract_feature_volume(
    views: list[SensorView],
    spec: VoxelGridSpec,
    trunc: float,
    sensor: str = "",
    stereo: bool | None = None,
    flags: bool = False,
):
    """Average per-view features over the views that see each voxel near its surface.

    With ``flags=True`` also returns an integer volume counting, per voxel, the
    contributing views whose depth patch contains a pixel marked in
    ``view.outliers``.
    """
    if stereo is None:
        stereo = bool(views) and all(v.stereo for v in views)
    m = N_STEREO if stereo else N_MONO
    centers = spec.centers()
    acc = np.zeros(spec.dims + (N_MONO,))
    count = np.zeros(spec.dims, dtype=np.int64)
    ncc_sum = np.zeros(spec.dims)
    ncc_sq = np.zeros(spec.dims)
    ncc_n = np.zeros(spec.dims, dtype=np.int64)
    flagged = np.zeros(spec.dims, dtype=np.int64)

    # canonical order makes the sums independent of how views were listed
    for view in sorted(views, key=_view_key):
        u, v, z = project_points(view.intr, view.pose, centers)
        rows, cols, mask = pixel_lookup(view.intr, u, v, z)
        measured = np.where(mask, view.depth[rows, cols], 0.0)
        use = mask & (measured > 0) & (np.abs(measured - z) <= trunc)
        r, c = rows[use], cols[use]
        pix = np.concatenate(
            [depth_patches(view.depth)[r, c], np.stack(grad_stats_image(view.image), -1)[r, c]],
            axis=-1,
        )
        acc[use] += pix
        count[use] += 1
        if stereo:
            nimg, has = stereo_ncc_image(view)
            sample = np.zeros(spec.dims, dtype=bool)
            sample[use] = has[r, c]
            vals = np.zeros(spec.dims)
            vals[use] = nimg[r, c]
            ncc_sum += np.where(sample, vals, 0.0)
            ncc_sq += np.where(sample, vals * vals, 0.0)
            ncc_n += sample
        if flags and view.outliers is not None:
            flagged[use] += _patch_contains(view.outliers)[r, c]

    feats = np.zeros((m,) + spec.dims)
    seen = count > 0
    feats[:N_MONO] = np.moveaxis(acc / np.maximum(count, 1)[..., None], -1, 0)
    if stereo:
        n = np.maximum(ncc_n, 1)
        mean = ncc_sum / n
        var = np.maximum(ncc_sq / n - mean * mean, 0.0)
        feats[11] = np.where(ncc_n > 0, mean, 0.0)
        feats[12] = np.where(ncc_n >= 2, np.sqrt(var), 0.0)
    feats[:, ~seen] = 0.0
    vol = FeatureVolume(spec, sensor, feats, count)
    if flags:
        return vol, flagged
    return vol
