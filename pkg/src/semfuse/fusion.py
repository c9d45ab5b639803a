"""TSDF integration, confidence-weighted fusion and semantic datacosts.

Depth maps are ``(H, W)`` float arrays in meters with ``0`` marking a missing
measurement. Label images are integer ``(H, W)`` arrays; ``UNKNOWN_LABEL``
marks pixels without a label.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .geometry import CameraIntrinsics, Pose, VoxelGridSpec, pixel_lookup, project_points

UNKNOWN_LABEL = -1
FREE_LABEL = 0

CONF_EPS = 1e-6
DELTA_FREE = 0.1
DELTA_OCC = 1.0


class ContractError(ValueError):
    """Inputs violate an operation's preconditions (shapes, specs, labels)."""


class DataError(ValueError):
    """Input data contains values the operation cannot interpret."""


@dataclasses.dataclass
class TsdfVolume:
    spec: VoxelGridSpec
    trunc: float
    values: np.ndarray = None
    weights: np.ndarray = None

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros(self.spec.dims)
        if self.weights is None:
            self.weights = np.zeros(self.spec.dims)
        if self.values.shape != self.spec.dims or self.weights.shape != self.spec.dims:
            raise ContractError("volume arrays do not match the grid spec")

    def copy(self) -> TsdfVolume:
        return TsdfVolume(self.spec, self.trunc, self.values.copy(), self.weights.copy())


@dataclasses.dataclass
class ConfidenceVolume:
    spec: VoxelGridSpec
    conf: np.ndarray

    def __post_init__(self):
        if self.conf.shape != self.spec.dims:
            raise ContractError("confidence array does not match the grid spec")
        if not np.all(np.isfinite(self.conf)) or np.any(self.conf < 0):
            raise ContractError("confidences must be finite and nonnegative")

    @classmethod
    def ones(cls, spec: VoxelGridSpec) -> ConfidenceVolume:
        return cls(spec, np.ones(spec.dims))


@dataclasses.dataclass
class SemanticDatacost:
    """Per-label evidence; ``cost`` has shape ``(n_labels, nx, ny, nz)``."""

    spec: VoxelGridSpec
    labels: tuple[str, ...]
    cost: np.ndarray

    def __post_init__(self):
        self.labels = tuple(self.labels)
        if len(self.labels) < 2:
            raise ContractError("need at least two labels (free plus one)")
        if self.cost.shape != (len(self.labels),) + self.spec.dims:
            raise ContractError(
                f"cost shape {self.cost.shape} does not match "
                f"{(len(self.labels),) + self.spec.dims}"
            )

    @classmethod
    def zeros(cls, spec: VoxelGridSpec, labels) -> SemanticDatacost:
        return cls(spec, labels, np.zeros((len(labels),) + spec.dims))


def _view_samples(spec: VoxelGridSpec, depth: np.ndarray, intr: CameraIntrinsics, pose: Pose):
    """Project every voxel center into one depth map.

    Returns ``(rows, cols, cam_depth, measured, valid)`` over the grid; ``valid``
    marks in-frustum voxels whose pixel carries a measurement.
    """
    if depth.shape != intr.shape:
        raise ContractError(f"depth map shape {depth.shape} != camera {intr.shape}")
    u, v, z = project_points(intr, pose, spec.centers())
    rows, cols, mask = pixel_lookup(intr, u, v, z)
    measured = np.where(mask, depth[rows, cols], 0.0)
    valid = mask & (measured > 0)
    return rows, cols, z, measured, valid


def integrate_depth_map(
    vol: TsdfVolume, depth: np.ndarray, intr: CameraIntrinsics, pose: Pose
) -> TsdfVolume:
    """Curless-Levoy running-average integration of one depth map (in place)."""
    if not vol.trunc > 0:
        raise ContractError("truncation must be positive")
    _, _, z, measured, valid = _view_samples(vol.spec, depth, intr, pose)
    sdf = measured - z
    update = valid & (sdf >= -vol.trunc)
    tsdf = np.clip(sdf[update] / vol.trunc, -1.0, 1.0)
    w = vol.weights[update]
    vol.values[update] = (vol.values[update] * w + tsdf) / (w + 1.0)
    vol.weights[update] = w + 1.0
    return vol


def fuse_weighted(
    volumes: list[TsdfVolume], confs: list[ConfidenceVolume], eps: float = CONF_EPS
) -> TsdfVolume:
    """Point-wise confidence-weighted average of per-sensor TSDFs.

    A sensor votes at a voxel only if it observed it; its vote is scaled by the
    learned confidence, not by its observation count.
    """
    if not volumes or len(volumes) != len(confs):
        raise ContractError("need one confidence volume per TSDF volume")
    spec = volumes[0].spec
    for v, c in zip(volumes, confs):
        if v.spec != spec or c.spec != spec:
            raise ContractError("all volumes must share one grid spec")
    num = np.zeros(spec.dims)
    den = np.zeros(spec.dims)
    for v, c in zip(volumes, confs):
        w = c.conf * (v.weights > 0)
        num += w * v.values
        den += w
    observed = den >= eps
    values = np.where(observed, num / np.where(observed, den, 1.0), 0.0)
    return TsdfVolume(spec, volumes[0].trunc, values, np.where(observed, den, 0.0))


def build_semantic_datacost(
    depth: np.ndarray,
    semseg: np.ndarray,
    intr: CameraIntrinsics,
    pose: Pose,
    spec: VoxelGridSpec,
    labels,
    trunc: float,
    delta_free: float = DELTA_FREE,
    delta_occ: float = DELTA_OCC,
    out: SemanticDatacost | None = None,
) -> SemanticDatacost:
    """Accumulate one labeled depth map into a semantic datacost.

    Voxels in front of the measured surface collect free-space evidence; voxels
    within the truncation band behind it collect evidence for the pixel's label.
    Pass ``out`` to accumulate several views of one sensor.
    """
    if semseg.shape != depth.shape:
        raise ContractError("semantic image and depth map differ in shape")
    n_labels = len(labels)
    known = semseg != UNKNOWN_LABEL
    bad = known & ((semseg <= FREE_LABEL) | (semseg >= n_labels))
    if np.any(bad):
        raise DataError(f"label ids {sorted(set(semseg[bad].tolist()))} not in label set")
    if out is None:
        out = SemanticDatacost.zeros(spec, labels)
    elif out.spec != spec or out.labels != tuple(labels):
        raise ContractError("accumulator does not match spec/labels")

    rows, cols, z, measured, valid = _view_samples(spec, depth, intr, pose)
    lab = semseg[rows, cols]
    valid &= lab != UNKNOWN_LABEL
    sdf = measured - z
    free = valid & (sdf > 0)
    occ = valid & (sdf <= 0) & (sdf >= -trunc)
    out.cost[FREE_LABEL][free] -= delta_free
    ix = np.nonzero(occ)
    np.subtract.at(out.cost, (lab[occ],) + ix, delta_occ)
    return out


def combine_datacosts(
    datacosts: list[SemanticDatacost], confs: list[ConfidenceVolume]
) -> SemanticDatacost:
    """Unnormalized confidence-weighted sum of per-sensor datacosts."""
    if not datacosts or len(datacosts) != len(confs):
        raise ContractError("need one confidence volume per datacost")
    first = datacosts[0]
    total = np.zeros_like(first.cost)
    for dc, c in zip(datacosts, confs):
        if dc.spec != first.spec or c.spec != first.spec or dc.labels != first.labels:
            raise ContractError("datacosts must share spec and label set")
        total += c.conf[None] * dc.cost
    return SemanticDatacost(first.spec, first.labels, total)


def combine_costs(costs: list[np.ndarray], confs: list[np.ndarray]) -> np.ndarray:
    """Array form of ``combine_datacosts``: ``sum_s conf_s[None] * cost_s``."""
    total = np.zeros_like(costs[0])
    for cost, conf in zip(costs, confs):
        total += conf[None] * cost
    return total


def combine_costs_backward(costs: list[np.ndarray], grad_total: np.ndarray) -> list[np.ndarray]:
    """Gradient of ``combine_costs`` with respect to each confidence array."""
    return [np.sum(grad_total * cost, axis=0) for cost in costs]
