"""Desk-scale benchmark: learned confidences against confidences frozen at 1.

Two sensors observe each room: a clean Kinect-like sensor and the same sensor
with sparse large outliers. For every training seed two models are trained on
the same scenes, one with learned confidence networks and one with the
confidences fixed to 1 (the regularizer is learned in both). Held-out scenes
then give the semantic accuracy of each model and, for the noisy sensor, the
mean learned confidence at voxels fed by outlier-contaminated depth patches
relative to the mean at clean voxels.

Run as ``python3 -m semfuse.pipeline.benchmark [--out result.json]``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import time

import numpy as np

from ..simdata import random_scene
from ..training import FusionModel, SceneData, Trainer, TrainingConfig, predict
from ..varsolver import SolverConfig, extract_labels
from .metrics import semantic_accuracy
from .workflow import SimulationSetup, fuse, scene_data, simulate

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class BenchmarkConfig:
    train_scenes: tuple[int, ...] = (100, 101, 102, 103)
    heldout_scenes: tuple[int, ...] = (104, 105)
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int = 300
    lr: float = 1e-4
    iterations: int = 10
    crop: int = 24
    batch_size: int = 4
    lambda_f: float = 1.5
    noisy_sensor: int = 1
    sa_margin: float = 0.02
    ratio_max: float = 0.7
    required_seeds: int = 2

    def training_config(self, seed: int, learn_confidence: bool) -> TrainingConfig:
        return TrainingConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            crop=self.crop,
            lambda_f=self.lambda_f,
            epochs=self.epochs,
            seed=seed,
            solver=SolverConfig(iterations=self.iterations),
            learn_confidence=learn_confidence,
        )


@dataclasses.dataclass
class BenchScene:
    data: SceneData
    flagged: np.ndarray  # per voxel: views of the noisy sensor whose patch held an outlier


@dataclasses.dataclass
class SeedResult:
    seed: int
    sa_learned: float
    sa_frozen: float
    confidence_ratio: float
    final_loss_learned: float
    final_loss_frozen: float
    seconds: float
    sa_gain_ok: bool
    ratio_ok: bool

    @property
    def passed(self) -> bool:
        return self.sa_gain_ok and self.ratio_ok


@dataclasses.dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    seeds: list[SeedResult]

    @property
    def passed(self) -> bool:
        return sum(r.passed for r in self.seeds) >= self.config.required_seeds

    def to_dict(self) -> dict:
        return {
            "config": dataclasses.asdict(self.config),
            "seeds": [dataclasses.asdict(r) | {"passed": r.passed} for r in self.seeds],
            "passed": self.passed,
        }


def build_scene(scene_seed: int, noisy_sensor: int = 1) -> BenchScene:
    scene = random_scene(scene_seed)
    sim = simulate(scene, SimulationSetup.benchmark(trajectory_seed=scene_seed), seed=scene_seed)
    fused = fuse(sim)
    return BenchScene(scene_data(fused, sim.gt, f"scene{scene_seed}"), fused[noisy_sensor].outlier_views)


def heldout_sa(model: FusionModel, scenes: list[BenchScene], iterations: int, learn_confidence: bool):
    """Mean held-out semantic accuracy and the per-scene confidences used."""
    sas, confs = [], []
    for s in scenes:
        u, c = predict(model, s.data, iterations, learn_confidence=learn_confidence)
        sas.append(semantic_accuracy(extract_labels(u), s.data.gt))
        confs.append(c)
    return float(np.mean(sas)), confs


def outlier_confidence_ratio(scenes: list[BenchScene], confs, sensor: int) -> float:
    """Mean confidence at outlier-fed voxels over the mean at clean observed voxels."""
    bad, clean = [], []
    for s, c in zip(scenes, confs):
        seen = s.data.counts[sensor] > 0
        bad.append(c[sensor][seen & (s.flagged > 0)])
        clean.append(c[sensor][seen & (s.flagged == 0)])
    bad, clean = np.concatenate(bad), np.concatenate(clean)
    if bad.size == 0 or clean.size == 0 or clean.mean() == 0:
        return float("nan")
    return float(bad.mean() / clean.mean())


def train_model(train: list[SceneData], config: TrainingConfig) -> Trainer:
    dims = [f.shape[0] for f in train[0].features]
    model = FusionModel.create(train[0].n_sensors, dims, train[0].costs[0].shape[0], config)
    trainer = Trainer(model, config)
    trainer.fit(train, callback=lambda st: log.debug("epoch %d loss %.5f", st.epoch, st.loss))
    return trainer


def run_seed(seed: int, train: list[BenchScene], heldout: list[BenchScene], cfg: BenchmarkConfig) -> SeedResult:
    start = time.perf_counter()
    data = [s.data for s in train]
    learned = train_model(data, cfg.training_config(seed, True))
    frozen = train_model(data, cfg.training_config(seed, False))
    sa_learned, confs = heldout_sa(learned.model, heldout, cfg.iterations, True)
    sa_frozen, _ = heldout_sa(frozen.model, heldout, cfg.iterations, False)
    ratio = outlier_confidence_ratio(heldout, confs, cfg.noisy_sensor)
    return SeedResult(
        seed,
        sa_learned,
        sa_frozen,
        ratio,
        learned.history[-1].loss if learned.history else float("nan"),
        frozen.history[-1].loss if frozen.history else float("nan"),
        time.perf_counter() - start,
        sa_learned - sa_frozen >= cfg.sa_margin,
        bool(ratio <= cfg.ratio_max),
    )


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig()) -> BenchmarkResult:
    train = [build_scene(s, cfg.noisy_sensor) for s in cfg.train_scenes]
    heldout = [build_scene(s, cfg.noisy_sensor) for s in cfg.heldout_scenes]
    results = []
    for seed in cfg.seeds:
        r = run_seed(seed, train, heldout, cfg)
        log.info(
            "seed %d: SA learned %.4f frozen %.4f, outlier confidence ratio %.3f (%.0f s)",
            r.seed, r.sa_learned, r.sa_frozen, r.confidence_ratio, r.seconds,
        )  # fmt: skip
        results.append(r)
    return BenchmarkResult(cfg, results)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=BenchmarkConfig.epochs)
    p.add_argument("--lr", type=float, default=BenchmarkConfig.lr)
    p.add_argument("--seeds", type=int, nargs="+", default=list(BenchmarkConfig.seeds))
    p.add_argument("--out", help="write the result as JSON")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = BenchmarkConfig(epochs=args.epochs, lr=args.lr, seeds=tuple(args.seeds))
    result = run_benchmark(cfg)
    text = json.dumps(result.to_dict(), indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0 if result.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
