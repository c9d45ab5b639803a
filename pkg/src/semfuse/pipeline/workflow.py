"""Scene-level orchestration: simulate sensors, then fuse each sensor's views."""

from __future__ import annotations

import dataclasses

import numpy as np

from ..features import FeatureVolume, SensorView, extract_feature_volume
from ..fusion import SemanticDatacost, TsdfVolume, build_semantic_datacost, integrate_depth_map
from ..geometry import CameraIntrinsics
from ..simdata import (
    Scene,
    SensorModel,
    default_intrinsics,
    generate_trajectory,
    ground_truth,
    kinect,
    noisy_kinect,
    simulate_sensor,
)
from ..training import SceneData

DEFAULT_VIEWS = 24
DEFAULT_TRUNC = 0.3


@dataclasses.dataclass
class SimulationSetup:
    sensors: list[SensorModel]
    intr: CameraIntrinsics = dataclasses.field(default_factory=default_intrinsics)
    views: int = DEFAULT_VIEWS
    trajectory_seed: int = 0
    trunc: float = DEFAULT_TRUNC

    @classmethod
    def benchmark(cls, trajectory_seed: int = 0) -> SimulationSetup:
        return cls([kinect(), noisy_kinect()], trajectory_seed=trajectory_seed)


@dataclasses.dataclass
class SimulatedScene:
    scene: Scene
    gt: np.ndarray
    views: dict[str, list[SensorView]]


@dataclasses.dataclass
class FusedSensor:
    name: str
    tsdf: TsdfVolume
    datacost: SemanticDatacost
    features: FeatureVolume
    outlier_views: np.ndarray | None = None


def simulate(scene: Scene, setup: SimulationSetup, seed: int) -> SimulatedScene:
    """All sensors share one trajectory (as with a rig of co-located sensors)."""
    poses = generate_trajectory(scene, setup.views, setup.trajectory_seed)
    views = {
        s.name: simulate_sensor(scene, s, poses, setup.intr, seed, sensor_index=i)
        for i, s in enumerate(setup.sensors)
    }
    return SimulatedScene(scene, ground_truth(scene), views)


def fuse_sensor(
    name: str, views: list[SensorView], scene: Scene, trunc: float, stereo: bool | None = None
) -> FusedSensor:
    spec = scene.spec
    tsdf = TsdfVolume(spec, trunc)
    dc = SemanticDatacost.zeros(spec, scene.labels)
    for v in views:
        integrate_depth_map(tsdf, v.depth, v.intr, v.pose)
        build_semantic_datacost(v.depth, v.semantics, v.intr, v.pose, spec, scene.labels, trunc, out=dc)
    feats, flagged = extract_feature_volume(views, spec, trunc, sensor=name, stereo=stereo, flags=True)
    return FusedSensor(name, tsdf, dc, feats, flagged)


def fuse(sim: SimulatedScene, trunc: float = DEFAULT_TRUNC) -> list[FusedSensor]:
    return [fuse_sensor(name, views, sim.scene, trunc) for name, views in sim.views.items()]


def scene_data(fused: list[FusedSensor], gt: np.ndarray, name: str = "") -> SceneData:
    return SceneData(
        [f.datacost.cost for f in fused],
        [f.features.features for f in fused],
        [f.features.count for f in fused],
        gt,
        name,
    )
