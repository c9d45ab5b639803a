"""Command line entry point: simulate -> fuse -> train -> reconstruct -> eval -> export.

Directory layouts::

    simulate --out SIM/   SIM/scene.json, SIM/setup.json, SIM/gt.vol,
                          SIM/<sensor>/{depth,image,semantics,outliers[,right_image]}.npy
    fuse --out FUSED/     FUSED/gt.vol, FUSED/sensors.json,
                          FUSED/<sensor>.{tsdf,datacost,features}.vol
    train --out RUN/      RUN/model.ckpt, RUN/loss.txt
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .features import SensorView
from .geometry import CameraIntrinsics, Pose
from .pipeline import io
from .pipeline.metrics import evaluate
from .pipeline.workflow import DEFAULT_TRUNC, DEFAULT_VIEWS, fuse_sensor
from .simdata import Scene, SensorModel, default_intrinsics, generate_trajectory, ground_truth, kinect, noisy_kinect, random_scene, simulate_sensor
from .training import AdamState, FusionModel, SceneData, Trainer, TrainingConfig, predict
from .varsolver import RegularizerW, extract_labels


class CliError(Exception):
    pass


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"no such file or directory: {p}")
    return p


# --- scene documents ----------------------------------------------------------


def _load_scene_doc(path) -> dict:
    return io.read_document(_require(path), io.SCENE_SCHEMA)


def _scene_from_doc(doc: dict) -> Scene:
    if "random_seed" in doc:
        scene = random_scene(doc["random_seed"])
        if "boxes" in doc:
            scene = Scene.from_dict({**scene.to_dict(), **doc})
        return scene
    return Scene.from_dict(doc)


def _sensors_from_doc(doc: dict) -> list[SensorModel]:
    if "sensors" not in doc:
        return [kinect(), noisy_kinect()]
    return [SensorModel.from_dict(s) for s in doc["sensors"]]


def _intr_from_doc(doc: dict) -> CameraIntrinsics:
    if "camera" not in doc:
        return default_intrinsics()
    c = doc["camera"]
    return CameraIntrinsics(c["fx"], c["fy"], c["cx"], c["cy"], int(c["width"]), int(c["height"]))


def _intr_dict(intr: CameraIntrinsics) -> dict:
    return {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy, "width": intr.width, "height": intr.height}


# --- commands -----------------------------------------------------------------


def cmd_simulate(args) -> None:
    doc = _load_scene_doc(args.scene)
    scene = _scene_from_doc(doc)
    sensors = _sensors_from_doc(doc)
    intr = _intr_from_doc(doc)
    traj = doc.get("trajectory", {})
    n_views = int(traj.get("views", DEFAULT_VIEWS))
    poses = generate_trajectory(scene, n_views, traj.get("seed", args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_document(out / "scene.json", scene.to_dict())
    setup = {
        "camera": _intr_dict(intr),
        "poses": [p.matrix().tolist() for p in poses],
        "sensors": [s.to_dict() for s in sensors],
        "seed": args.seed,
        "truncation": float(doc.get("truncation", DEFAULT_TRUNC)),
    }
    io.write_document(out / "setup.json", setup)
    gt = ground_truth(scene)
    io.save_volume(out / "gt.vol", io.VolumeFile("labels", scene.spec, gt, scene.labels))
    for i, sensor in enumerate(sensors):
        views = simulate_sensor(scene, sensor, poses, intr, args.seed, sensor_index=i)
        d = out / sensor.name
        d.mkdir(exist_ok=True)
        np.save(d / "depth.npy", np.stack([v.depth for v in views]))
        np.save(d / "image.npy", np.stack([v.image for v in views]))
        np.save(d / "semantics.npy", np.stack([v.semantics for v in views]))
        np.save(d / "outliers.npy", np.stack([v.outliers for v in views]))
        if sensor.stereo:
            np.save(d / "right_image.npy", np.stack([v.right_image for v in views]))
    print(f"simulated {len(sensors)} sensors x {n_views} views -> {out}")


def _load_views(sim: Path, sensor: SensorModel, intr, poses) -> list[SensorView]:
    d = _require(sim / sensor.name)
    depth = np.load(_require(d / "depth.npy"))
    image = np.load(_require(d / "image.npy"))
    sem = np.load(_require(d / "semantics.npy"))
    outl = np.load(d / "outliers.npy") if (d / "outliers.npy").exists() else [None] * len(depth)
    right = np.load(d / "right_image.npy") if sensor.stereo else [None] * len(depth)
    return [
        SensorView(
            depth[k], image[k], intr, poses[k], sem[k], right[k],
            sensor.baseline if sensor.stereo else 0.0, outl[k],
        )
        for k in range(len(depth))
    ]  # fmt: skip


def cmd_fuse(args) -> None:
    sim = _require(args.input)
    scene = Scene.from_dict(json.loads(_require(sim / "scene.json").read_text()))
    setup = json.loads(_require(sim / "setup.json").read_text())
    intr = _intr_from_doc(setup)
    poses = [Pose.from_matrix(np.array(m)) for m in setup["poses"]]
    trunc = float(setup.get("truncation", DEFAULT_TRUNC))
    spec = scene.spec
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for sd in setup["sensors"]:
        sensor = SensorModel.from_dict(sd)
        views = _load_views(sim, sensor, intr, poses)
        fused = fuse_sensor(sensor.name, views, scene, trunc, stereo=sensor.stereo)
        tsdf, dc, feats = fused.tsdf, fused.datacost, fused.features
        io.save_volume(
            out / f"{sensor.name}.tsdf.vol",
            io.VolumeFile("tsdf", spec, np.stack([tsdf.values, tsdf.weights]), ("value", "weight")),
        )
        io.save_volume(out / f"{sensor.name}.datacost.vol", io.VolumeFile("datacost", spec, dc.cost, scene.labels))
        fnames = tuple(f"f{i}" for i in range(feats.dim)) + ("count",)
        io.save_volume(
            out / f"{sensor.name}.features.vol",
            io.VolumeFile("features", spec, np.concatenate([feats.features, feats.count[None]]), fnames),
        )
        names.append(sensor.name)
    gt = io.load_volume(_require(sim / "gt.vol"))
    io.save_volume(out / "gt.vol", gt)
    io.write_document(out / "sensors.json", {"sensors": names, "labels": list(scene.labels), "truncation": trunc})
    print(f"fused {len(names)} sensors -> {out}")


def _load_fused(path) -> SceneData:
    d = _require(path)
    meta = json.loads(_require(d / "sensors.json").read_text())
    costs, feats, counts = [], [], []
    for name in meta["sensors"]:
        costs.append(io.load_volume(_require(d / f"{name}.datacost.vol")).data.astype(np.float64))
        fv = io.load_volume(_require(d / f"{name}.features.vol")).data.astype(np.float64)
        feats.append(fv[:-1])
        counts.append(fv[-1])
    gt_path = d / "gt.vol"
    gt = io.load_volume(gt_path).data[0].astype(np.int64) if gt_path.exists() else None
    return SceneData(costs, feats, counts, gt, str(d))


def _load_config(args) -> TrainingConfig:
    doc = io.read_document(_require(args.config), io.CONFIG_SCHEMA) if args.config else {}
    doc["seed"] = args.seed
    if args.epochs is not None:
        doc["epochs"] = args.epochs
    if args.iterations is not None:
        doc.setdefault("solver", {})["iterations"] = args.iterations
    return TrainingConfig(**doc)


def _save_model(path, model: FusionModel, adam: AdamState | None, epoch: int, config: dict | None) -> None:
    arrays = dict(model.named_arrays())
    if adam is not None:
        for k in adam.m:
            arrays[f"adam.m.{k}"] = adam.m[k]
            arrays[f"adam.v.{k}"] = adam.v[k]
    meta = {"epoch": epoch, "adam_step": adam.step if adam else 0, "config": config}
    io.save_checkpoint(path, arrays, meta)


def _load_model(path):
    arrays, meta = io.load_checkpoint(_require(path))
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    model = FusionModel.from_named_arrays(model_arrays)
    m = {k[len("adam.m.") :]: v for k, v in arrays.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v.") :]: a for k, a in arrays.items() if k.startswith("adam.v.")}
    adam = AdamState(m, v, int(meta["adam_step"])) if m else None
    return model, adam, meta


def cmd_train(args) -> None:
    config = _load_config(args)
    scenes = [_load_fused(p) for p in args.input]
    if any(s.gt is None for s in scenes):
        raise CliError("training scenes need gt.vol")
    if args.checkpoint:
        model, adam, meta = _load_model(args.checkpoint)
        trainer = Trainer(model, config, adam, int(meta["epoch"]))
    else:
        dims = [f.shape[0] for f in scenes[0].features]
        model = FusionModel.create(scenes[0].n_sensors, dims, scenes[0].costs[0].shape[0], config)
        trainer = Trainer(model, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer.fit(scenes)
    rows = ["epoch loss loss_s loss_f sigma tau"]
    rows += [
        f"{s.epoch} {s.loss:.8e} {s.loss_s:.8e} {s.loss_f:.8e} {s.sigma:.8e} {s.tau:.8e}"
        for s in trainer.history
    ]
    (out / "loss.txt").write_text("\n".join(rows) + "\n")
    _save_model(out / "model.ckpt", trainer.model, trainer.adam, trainer.epoch, config.to_dict())
    print(f"trained {len(trainer.history)} epochs -> {out}")


def cmd_reconstruct(args) -> None:
    scene = _load_fused(args.input)
    n_labels = scene.costs[0].shape[0]
    if args.checkpoint:
        model, _, _ = _load_model(args.checkpoint)
        learn = True
    else:
        model = FusionModel([], RegularizerW.forward_difference(n_labels, 0.1))
        learn = False
    iters = 50 if args.iterations is None else args.iterations
    u, _ = predict(model, scene, iters, args.levels, learn_confidence=learn)
    labels = extract_labels(u)
    meta = json.loads((Path(args.input) / "sensors.json").read_text())
    spec = io.load_volume(Path(args.input) / f"{meta['sensors'][0]}.datacost.vol").spec
    io.save_volume(args.out, io.VolumeFile("labels", spec, labels, meta["labels"]))
    print(f"reconstructed -> {args.out}")


def cmd_eval(args) -> None:
    pred = io.load_volume(_require(args.input))
    gt = io.load_volume(_require(args.gt))
    if pred.kind != "labels" or gt.kind != "labels":
        raise CliError("eval needs two label volumes")
    report = evaluate(pred.data[0].astype(np.int64), gt.data[0].astype(np.int64), gt.names)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_export(args) -> None:
    vol = io.load_volume(_require(args.input))
    if vol.kind == "labels":
        occ = vol.data[0]
    elif vol.kind == "tsdf":
        values, weights = vol.data[0], vol.data[1]
        occ = ((weights > 0) & (values <= 0) & (values > -1)).astype(np.float32)
    else:
        raise CliError(f"cannot export a {vol.kind} volume")
    nv, nf = io.export_ply(args.out, occ, vol.spec)
    print(f"exported {nv} vertices, {nf} faces -> {args.out}")


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semfuse", description="Learned multi-sensor semantic depth fusion.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_, out_required=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required)
        sp.set_defaults(func=func)
        return sp

    sp = add("simulate", cmd_simulate, "render and corrupt sensor views of a scene")
    sp.add_argument("--scene", required=True, help="scene JSON document")

    sp = add("fuse", cmd_fuse, "integrate simulated views into per-sensor volumes")
    sp.add_argument("--input", required=True, help="simulate output directory")

    sp = add("train", cmd_train, "train confidences and regularizer on fused scenes")
    sp.add_argument("--input", nargs="+", required=True, help="fuse output directories")
    sp.add_argument("--config", help="training config JSON document")
    sp.add_argument("--checkpoint", help="resume from this checkpoint")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--iterations", type=int)

    sp = add("reconstruct", cmd_reconstruct, "solve for a label volume")
    sp.add_argument("--input", required=True, help="fuse output directory")
    sp.add_argument("--checkpoint", help="trained model; unit confidences and TV if omitted")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--levels", type=int, default=1)

    sp = add("eval", cmd_eval, "compare a predicted label volume with ground truth", out_required=False)
    sp.add_argument("--input", required=True, help="predicted label volume")
    sp.add_argument("--gt", required=True, help="ground-truth label volume")

    sp = add("export", cmd_export, "write occupied voxels as a PLY mesh")
    sp.add_argument("--input", required=True, help="labels or tsdf volume")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CliError, io.FormatError, ValueError, OSError, KeyError) as exc:
        print(f"semfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
