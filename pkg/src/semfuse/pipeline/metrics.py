"""Evaluation metrics on discrete label volumes.

Ground truth uses ``-1`` for unknown voxels and ``0`` for free space; unknown
voxels never enter a numerator or denominator.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import ndimage

from ..fusion import FREE_LABEL, UNKNOWN_LABEL, ContractError
from ..simdata import surface_voxels

TP_RATE_DEFINITION = "fraction of GT-occupied voxels predicted as any occupied label"
DISTANCE_DEFINITION = (
    "mean Euclidean distance (voxels) from each predicted surface voxel to the nearest GT "
    "surface voxel; one-directional pred->GT"
)


def _check(pred, gt):
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ")


def semantic_accuracy(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """Correctly labeled GT-occupied voxels over all GT-occupied voxels."""
    _check(pred, gt)
    occ = gt > FREE_LABEL
    n = int(occ.sum())
    if n == 0:
        return None
    return float(np.sum(pred[occ] == gt[occ]) / n)


def free_space_accuracy(pred: np.ndarray, gt: np.ndarray) -> float | None:
    _check(pred, gt)
    free = gt == FREE_LABEL
    n = int(free.sum())
    if n == 0:
        return None
    return float(np.sum(pred[free] == FREE_LABEL) / n)


def completion_tp_rate(pred: np.ndarray, gt: np.ndarray) -> float | None:
    _check(pred, gt)
    occ = gt > FREE_LABEL
    n = int(occ.sum())
    if n == 0:
        return None
    return float(np.sum(pred[occ] > FREE_LABEL) / n)


def _surface(labels: np.ndarray) -> np.ndarray:
    occ = labels > FREE_LABEL
    open_ = (labels == FREE_LABEL) | (labels == UNKNOWN_LABEL)
    return surface_voxels(occ, open_)


def mean_surface_distance(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """Mean distance from predicted surface voxels to the GT surface (exact EDT)."""
    _check(pred, gt)
    ps = _surface(pred)
    gs = _surface(gt)
    if not ps.any() or not gs.any():
        return None
    dist = ndimage.distance_transform_edt(~gs)
    return float(dist[ps].mean())


def confusion(pred: np.ndarray, gt: np.ndarray, n_labels: int) -> np.ndarray:
    """``counts[g, p]`` over known GT voxels."""
    _check(pred, gt)
    known = gt != UNKNOWN_LABEL
    idx = gt[known].astype(np.int64) * n_labels + pred[known].astype(np.int64)
    return np.bincount(idx, minlength=n_labels * n_labels).reshape(n_labels, n_labels)


@dataclasses.dataclass
class MetricsReport:
    semantic_accuracy: float | None
    free_space_accuracy: float | None
    completion_tp_rate: float | None
    mean_surface_distance: float | None
    confusion: np.ndarray
    labels: tuple[str, ...] = ()

    def to_text(self) -> str:
        """``key: value`` lines with fixed field names."""

        def fmt(v):
            return "absent" if v is None else f"{v:.6f}"

        lines = [
            f"semantic_accuracy: {fmt(self.semantic_accuracy)}",
            f"free_space_accuracy: {fmt(self.free_space_accuracy)}",
            f"completion_tp_rate: {fmt(self.completion_tp_rate)}",
            f"mean_surface_distance: {fmt(self.mean_surface_distance)}",
            f"completion_tp_rate_definition: {TP_RATE_DEFINITION}",
            f"mean_surface_distance_definition: {DISTANCE_DEFINITION}",
            "labels: " + " ".join(self.labels),
            "confusion (rows=gt, cols=pred):",
        ]
        lines += ["  " + " ".join(str(int(c)) for c in row) for row in self.confusion]
        return "\n".join(lines) + "\n"


def evaluate(pred: np.ndarray, gt: np.ndarray, labels) -> MetricsReport:
    labels = tuple(labels)
    return MetricsReport(
        semantic_accuracy(pred, gt),
        free_space_accuracy(pred, gt),
        completion_tp_rate(pred, gt),
        mean_surface_distance(pred, gt),
        confusion(pred, gt, len(labels)),
        labels,
    )
