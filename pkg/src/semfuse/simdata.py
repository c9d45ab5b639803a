"""Synthetic box-world rooms and simulated depth sensors.

A scene is a room shell (floor, walls, ceiling) plus axis-aligned labeled
boxes, all snapped to the voxel grid so that ground truth is unambiguous.
Sensors render exact z-depth by ray casting and then apply an ordered list of
corruption models.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import ndimage

from .features import SensorView, grad_stats_image
from .fusion import FREE_LABEL, UNKNOWN_LABEL
from .geometry import (
    CameraIntrinsics,
    Pose,
    VoxelGridSpec,
    camera_rays,
    pixel_lookup,
    project_points,
)

DEFAULT_LABELS = ("free", "floor", "wall", "ceiling", "table", "box")
DEFAULT_ROOM = (6.4, 6.4, 3.2)
DEFAULT_VOXEL = 0.1
DEFAULT_TEXTURES = {
    "floor": (0.30, 2.0),
    "wall": (0.60, 0.0),
    "ceiling": (0.80, 0.0),
    "table": (0.40, 3.0),
    "box": (0.50, 4.0),
}
KINECT_A = 0.002
KINECT_B = 0.002
TEXTURE_AMPLITUDE = 0.25


@dataclasses.dataclass(frozen=True)
class Box:
    label: str
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate box {self}")


@dataclasses.dataclass
class Scene:
    size: tuple[float, float, float] = DEFAULT_ROOM
    voxel_size: float = DEFAULT_VOXEL
    wall_thickness: float = 0.2
    labels: tuple[str, ...] = DEFAULT_LABELS
    boxes: list[Box] = dataclasses.field(default_factory=list)
    textures: dict = dataclasses.field(default_factory=lambda: dict(DEFAULT_TEXTURES))
    shell: bool = True

    def __post_init__(self):
        self.size = tuple(float(s) for s in self.size)
        self.labels = tuple(self.labels)
        if self.labels[FREE_LABEL] != "free":
            raise ValueError("label 0 must be 'free'")
        for b in self.boxes:
            if b.label not in self.labels[1:]:
                raise ValueError(f"box label {b.label!r} not in label set")
            if any(l < -1e-9 or h > s + 1e-9 for l, h, s in zip(b.lo, b.hi, self.size)):
                raise ValueError(f"box {b} leaves the room")

    @property
    def spec(self) -> VoxelGridSpec:
        dims = tuple(int(round(s / self.voxel_size)) for s in self.size)
        return VoxelGridSpec(np.zeros(3), self.voxel_size, dims)

    def label_id(self, name: str) -> int:
        return self.labels.index(name)

    def shell_boxes(self) -> list[Box]:
        if not self.shell:
            return []
        sx, sy, sz = self.size
        t = self.wall_thickness
        return [
            Box("floor", (0, 0, 0), (sx, sy, t)),
            Box("ceiling", (0, 0, sz - t), (sx, sy, sz)),
            Box("wall", (0, 0, t), (t, sy, sz - t)),
            Box("wall", (sx - t, 0, t), (sx, sy, sz - t)),
            Box("wall", (t, 0, t), (sx - t, t, sz - t)),
            Box("wall", (t, sy - t, t), (sx - t, sy, sz - t)),
        ]

    def all_boxes(self) -> list[Box]:
        return self.shell_boxes() + list(self.boxes)

    def to_dict(self) -> dict:
        return {
            "size": list(self.size),
            "voxel_size": self.voxel_size,
            "wall_thickness": self.wall_thickness,
            "labels": list(self.labels),
            "shell": self.shell,
            "boxes": [{"label": b.label, "min": list(b.lo), "max": list(b.hi)} for b in self.boxes],
            "textures": {
                k: {"base": v[0], "stripe_freq": v[1]} for k, v in sorted(self.textures.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        textures = dict(DEFAULT_TEXTURES)
        for k, v in d.get("textures", {}).items():
            textures[k] = (float(v["base"]), float(v["stripe_freq"]))
        return cls(
            size=tuple(d.get("size", DEFAULT_ROOM)),
            voxel_size=float(d.get("voxel_size", DEFAULT_VOXEL)),
            wall_thickness=float(d.get("wall_thickness", 0.2)),
            labels=tuple(d.get("labels", DEFAULT_LABELS)),
            boxes=[Box(b["label"], b["min"], b["max"]) for b in d.get("boxes", [])],
            textures=textures,
            shell=bool(d.get("shell", True)),
        )


def ground_truth(scene: Scene) -> np.ndarray:
    """Integer label volume; shell voxels outside the inner shell layer are unknown."""
    spec = scene.spec
    centers = spec.centers()
    gt = np.full(spec.dims, FREE_LABEL, dtype=np.int64)
    for box in scene.all_boxes():
        inside = np.all((centers > box.lo) & (centers < box.hi), axis=-1)
        gt[inside] = scene.label_id(box.label)
    if scene.shell:
        outer = scene.wall_thickness - scene.voxel_size
        size = np.asarray(scene.size)
        dist = np.minimum(centers, size - centers).min(axis=-1)
        gt[dist < outer] = UNKNOWN_LABEL
    return gt


# --- rendering -----------------------------------------------------------------


def _cast(scene: Scene, intr: CameraIntrinsics, pose: Pose):
    """Nearest hit per pixel: ``(t, box_index, world_dirs, origin)``; ``t`` is z-depth."""
    rays = camera_rays(intr).reshape(-1, 3)
    dirs = rays @ pose.rotation
    origin = pose.center
    boxes = scene.all_boxes()
    t_best = np.full(len(dirs), np.inf)
    idx_best = np.full(len(dirs), -1)
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    for k, box in enumerate(boxes):
        t1 = (np.asarray(box.lo) - origin) / safe
        t2 = (np.asarray(box.hi) - origin) / safe
        near = np.minimum(t1, t2).max(axis=1)
        far = np.maximum(t1, t2).min(axis=1)
        hit = (near <= far) & (near > 1e-9) & (near < t_best)
        t_best[hit] = near[hit]
        idx_best[hit] = k
    return t_best, idx_best, dirs, origin, boxes


def render_depth(scene: Scene, intr: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Exact z-depth; ``0`` where the ray leaves the scene."""
    t, idx, *_ = _cast(scene, intr, pose)
    return np.where(idx >= 0, t, 0.0).reshape(intr.shape)


def render_semantics(scene: Scene, intr: CameraIntrinsics, pose: Pose) -> np.ndarray:
    _, idx, _, _, boxes = _cast(scene, intr, pose)
    ids = np.array([scene.label_id(b.label) for b in boxes] + [UNKNOWN_LABEL])
    return ids[idx].reshape(intr.shape)


def texture(scene: Scene, label: str, points: np.ndarray) -> np.ndarray:
    base, freq = scene.textures.get(label, (0.5, 0.0))
    return base + TEXTURE_AMPLITUDE * np.sin(2.0 * np.pi * freq * points.sum(axis=-1))


def render_image(scene: Scene, intr: CameraIntrinsics, pose: Pose, baseline: float | None = None):
    """Grayscale image from procedural stripe textures; ``0`` where nothing is hit.

    With ``baseline`` returns ``(left, right)`` for a rectified stereo pair whose
    right camera sits ``baseline`` meters along the left camera's x axis.
    """
    t, idx, dirs, origin, boxes = _cast(scene, intr, pose)
    img = np.zeros(len(t))
    pts = origin + dirs * np.where(idx >= 0, t, 0.0)[:, None]
    for k, box in enumerate(boxes):
        sel = idx == k
        if np.any(sel):
            img[sel] = texture(scene, box.label, pts[sel])
    img = img.reshape(intr.shape)
    if baseline is None:
        return img
    right_pose = Pose(pose.rotation, pose.translation - np.array([baseline, 0.0, 0.0]))
    return img, render_image(scene, intr, right_pose)


# --- sensor models -------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class NoiseComponent:
    """``kind`` is one of ``perfect``, ``gaussian``, ``outlier``, ``lowtexture_dropout``.

    ``gaussian``: std ``a + b d^2``. ``outlier``: with probability ``p`` add
    ``N(0, sigma_out)`` (``mode='offset'``) or replace the depth with
    ``|N(0, sigma_out)|`` (``mode='absolute'``). ``lowtexture_dropout``: drop
    pixels whose local gradient mean is below ``g_min``.
    """

    kind: str
    a: float = 0.0
    b: float = 0.0
    p: float = 0.0
    sigma_out: float = 0.0
    g_min: float = 0.0
    mode: str = "offset"

    def __post_init__(self):
        if self.kind not in ("perfect", "gaussian", "outlier", "lowtexture_dropout"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("outlier probability must lie in [0, 1]")
        if min(self.a, self.b, self.sigma_out, self.g_min) < 0:
            raise ValueError("noise parameters must be nonnegative")
        if self.mode not in ("offset", "absolute"):
            raise ValueError(f"unknown outlier mode {self.mode!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "gaussian":
            d.update(a=self.a, b=self.b)
        elif self.kind == "outlier":
            d.update(p=self.p, sigma_out=self.sigma_out, mode=self.mode)
        elif self.kind == "lowtexture_dropout":
            d.update(g_min=self.g_min)
        return d


@dataclasses.dataclass(frozen=True)
class SensorModel:
    name: str
    components: tuple[NoiseComponent, ...] = ()
    stereo: bool = False
    baseline: float = 0.1

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "stereo": self.stereo,
            "baseline": self.baseline,
            "models": [c.to_dict() for c in self.components],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SensorModel:
        comps = tuple(NoiseComponent(**m) for m in d.get("models", []))
        return cls(d["name"], comps, bool(d.get("stereo", False)), float(d.get("baseline", 0.1)))


def kinect(name="kinect", a=KINECT_A, b=KINECT_B) -> SensorModel:
    return SensorModel(name, (NoiseComponent("gaussian", a=a, b=b),))


def noisy_kinect(name="noisy_kinect", p=0.01, sigma_out=2.0) -> SensorModel:
    return SensorModel(
        name,
        (
            NoiseComponent("gaussian", a=KINECT_A, b=KINECT_B),
            NoiseComponent("outlier", p=p, sigma_out=sigma_out),
        ),
    )


def stereo_like(name="stereo", g_min=0.02, a=0.005, b=0.005, baseline=0.1) -> SensorModel:
    return SensorModel(
        name,
        (
            NoiseComponent("lowtexture_dropout", g_min=g_min),
            NoiseComponent("gaussian", a=a, b=b),
        ),
        stereo=True,
        baseline=baseline,
    )


def corrupt(depth: np.ndarray, model, rng: np.random.Generator, image=None, return_mask=False):
    """Apply noise components in order. Depths pushed to ``<= 0`` become missing.

    ``model`` is a ``SensorModel`` or a sequence of ``NoiseComponent``. With
    ``return_mask`` also returns the boolean map of pixels hit by outliers.
    """
    comps = model.components if isinstance(model, SensorModel) else tuple(model)
    out = np.array(depth, dtype=np.float64, copy=True)
    outliers = np.zeros(out.shape, dtype=bool)
    for c in comps:
        valid = out > 0
        if c.kind == "perfect":
            continue
        if c.kind == "gaussian":
            if c.a == 0.0 and c.b == 0.0:
                continue
            std = c.a + c.b * out * out
            noise = rng.standard_normal(out.shape)
            out = np.where(valid, out + std * noise, out)
        elif c.kind == "outlier":
            hit = valid & (rng.random(out.shape) < c.p)
            draw = rng.standard_normal(out.shape) * c.sigma_out
            if c.mode == "offset":
                out = np.where(hit, out + draw, out)
            else:
                out = np.where(hit, np.abs(draw), out)
            outliers |= hit
        elif c.kind == "lowtexture_dropout":
            if image is None:
                raise ValueError("lowtexture_dropout needs the sensor image")
            gmean, _ = grad_stats_image(image)
            out = np.where(gmean < c.g_min, 0.0, out)
        out = np.where(out > 0, out, 0.0)
    if return_mask:
        return out, outliers & (out > 0)
    return out


# --- trajectories --------------------------------------------------------------


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=50.0, fy=50.0, cx=39.5, cy=29.5, width=80, height=60)


def generate_trajectory(scene: Scene, n: int, rng) -> list[Pose]:
    """Cameras on a ring inside the room, looking inward at varying heights."""
    if n < 1:
        raise ValueError("need at least one view")
    rng = np.random.default_rng(rng)
    sx, sy, sz = scene.size
    center = np.array([sx / 2, sy / 2])
    radius = 0.38 * min(sx, sy)
    phase = rng.uniform(0, 2 * np.pi)
    poses = []
    for k in range(n):
        theta = phase + 2 * np.pi * k / n + rng.uniform(-0.1, 0.1)
        eye_xy = center + radius * np.array([np.cos(theta), np.sin(theta)])
        eye = np.array([eye_xy[0], eye_xy[1], sz * rng.uniform(0.45, 0.6)])
        tilt = (0.1, 0.9, 0.35, 0.65)[k % 4]
        target_xy = center + rng.uniform(-0.4, 0.4, size=2)
        target = np.array([target_xy[0], target_xy[1], sz * tilt])
        poses.append(Pose.look_at(eye, target))
    return poses


def random_scene(seed, labels=DEFAULT_LABELS) -> Scene:
    """Default benchmark room with a table and a few boxes on the floor."""
    rng = np.random.default_rng(seed)
    sx, sy, sz = DEFAULT_ROOM
    v = DEFAULT_VOXEL
    floor = 0.2
    snap = lambda x: round(x / v) * v  # noqa: E731
    boxes: list[Box] = []
    footprints = []

    def free_spot(w, d):
        for _ in range(200):
            x = snap(rng.uniform(0.5, sx - 0.5 - w))
            y = snap(rng.uniform(0.5, sy - 0.5 - d))
            fp = (x - 0.2, y - 0.2, x + w + 0.2, y + d + 0.2)
            if all(fp[2] <= o[0] or o[2] <= fp[0] or fp[3] <= o[1] or o[3] <= fp[1] for o in footprints):
                footprints.append(fp)
                return x, y
        return None

    for _ in range(int(rng.integers(1, 3))):
        w, d = snap(rng.uniform(0.8, 1.6)), snap(rng.uniform(0.6, 1.0))
        h = snap(rng.uniform(0.7, 0.8))
        spot = free_spot(w, d)
        if spot is None:
            continue
        x, y = spot
        boxes.append(Box("table", (x, y, floor + h - v), (x + w, y + d, floor + h)))
        for lx, ly in ((x, y), (x + w - v, y), (x, y + d - v), (x + w - v, y + d - v)):
            boxes.append(Box("table", (lx, ly, floor), (lx + v, ly + v, floor + h - v)))
    for _ in range(int(rng.integers(2, 5))):
        w, d = snap(rng.uniform(0.4, 1.2)), snap(rng.uniform(0.4, 1.2))
        h = snap(rng.uniform(0.3, 1.0))
        spot = free_spot(w, d)
        if spot is None:
            continue
        x, y = spot
        boxes.append(Box("box", (x, y, floor), (x + w, y + d, floor + h)))
    return Scene(labels=labels, boxes=[_rounded(b) for b in boxes])


def _rounded(b: Box) -> Box:
    return Box(b.label, tuple(round(x, 6) for x in b.lo), tuple(round(x, 6) for x in b.hi))


def simulate_sensor(
    scene: Scene,
    sensor: SensorModel,
    poses: list[Pose],
    intr: CameraIntrinsics,
    seed: int,
    sensor_index: int = 0,
) -> list[SensorView]:
    """Render and corrupt every view; each view draws from its own seeded stream."""
    views = []
    for k, pose in enumerate(poses):
        rng = np.random.default_rng([seed, sensor_index, k])
        clean = render_depth(scene, intr, pose)
        sem = render_semantics(scene, intr, pose)
        if sensor.stereo:
            image, right = render_image(scene, intr, pose, baseline=sensor.baseline)
        else:
            image, right = render_image(scene, intr, pose), None
        depth, mask = corrupt(clean, sensor, rng, image=image, return_mask=True)
        views.append(
            SensorView(
                depth=depth,
                image=image,
                intr=intr,
                pose=pose,
                semantics=sem,
                right_image=right,
                baseline=sensor.baseline if sensor.stereo else 0.0,
                outliers=mask,
            )
        )
    return views


def surface_voxels(occupied: np.ndarray, open_: np.ndarray | None = None) -> np.ndarray:
    """Occupied voxels with a 6-neighbor in ``open_`` (default: not occupied).

    Neighbors beyond the grid border do not count.
    """
    occupied = np.asarray(occupied, dtype=bool)
    open_ = ~occupied if open_ is None else np.asarray(open_, dtype=bool)
    touch = np.zeros_like(occupied)
    for axis in range(3):
        n = occupied.shape[axis]
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis], hi[axis] = slice(0, n - 1), slice(1, n)
        touch[tuple(lo)] |= open_[tuple(hi)]
        touch[tuple(hi)] |= open_[tuple(lo)]
    return occupied & touch


def visible_surface(gt: np.ndarray, spec: VoxelGridSpec, views: list[SensorView], trunc: float):
    """Split GT surface voxels (occupied, facing free space) into seen and all.

    A voxel counts as seen when some view's measured depth places it inside
    the integration band: at most ``trunc`` behind, or one voxel in front of,
    the measured surface. Returns ``(seen, surface)`` masks.
    """
    surf = surface_voxels(gt > FREE_LABEL, gt == FREE_LABEL)
    seen = np.zeros(spec.dims, dtype=bool)
    centers = spec.centers()
    for view in views:
        u, v, z = project_points(view.intr, view.pose, centers)
        rows, cols, mask = pixel_lookup(view.intr, u, v, z)
        sdf = np.where(mask, view.depth[rows, cols], 0.0) - z
        valid = mask & (view.depth[rows, cols] > 0)
        seen |= valid & (sdf >= -trunc) & (sdf <= spec.voxel_size)
    return surf & seen, surf


def binomial_bound(n: int, p: float, k: float = 3.0) -> float:
    return k * math.sqrt(n * p * (1 - p))


def zero_crossings(tsdf) -> np.ndarray:
    """Observed voxels at or behind the surface with an observed 6-neighbor in front."""
    seen = tsdf.weights > 0
    return surface_voxels(seen & (tsdf.values <= 0), seen & (tsdf.values > 0))


def surface_fidelity(tsdf, gt: np.ndarray, views: list[SensorView], tol: float = 1.0):
    """Fraction of seen GT surface voxels within ``tol`` voxels of a TSDF zero crossing."""
    seen, _ = visible_surface(gt, tsdf.spec, views, tsdf.trunc)
    cross = zero_crossings(tsdf)
    if not seen.any():
        return None
    if not cross.any():
        return 0.0
    dist = ndimage.distance_transform_edt(~cross)
    return float(np.mean(dist[seen] <= tol))
