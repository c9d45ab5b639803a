"""Acceptance suite: one test per criterion, each reporting a PASS or FAIL line.

Tolerances are the stated ones; nothing here is tuned to make a check pass.
"""

import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from gradcheck import numeric_grad, rel_error
from semfuse.cli import main as cli_main
from semfuse.confidence import backward as mlp_backward
from semfuse.confidence import forward as mlp_forward
from semfuse.confidence import init_params
from semfuse.fusion import ConfidenceVolume, TsdfVolume, fuse_weighted, integrate_depth_map
from semfuse.geometry import VoxelGridSpec
from semfuse.pipeline.benchmark import BenchmarkConfig, run_benchmark
from semfuse.simdata import (
    NoiseComponent,
    SensorModel,
    binomial_bound,
    corrupt,
    default_intrinsics,
    generate_trajectory,
    ground_truth,
    random_scene,
    simulate_sensor,
    surface_fidelity,
)
from semfuse.varsolver import (
    RegularizerW,
    apply_W,
    apply_W_adjoint,
    constraint_residual,
    group_norms,
    kernel_gradient,
    solve_array,
)
from test_training import full_chain_errors
from test_varsolver import exhaustive_matches, solver_gradient_errors


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --- 1 -----------------------------------------------------------------------------


def _sensors(rng, n, dims):
    spec = VoxelGridSpec(np.zeros(3), 0.1, dims)
    vols, confs = [], []
    for _ in range(n):
        w = rng.integers(0, 3, dims).astype(float)
        vols.append(TsdfVolume(spec, 0.3, np.where(w > 0, rng.uniform(-1, 1, dims), 0.0), w))
        confs.append(ConfidenceVolume(spec, rng.uniform(0.1, 3, dims)))
    return spec, vols, confs


def test_criterion_1_fusion_identities():
    rng = np.random.default_rng(11)
    exact = True
    scale_err = 0.0
    for trial in range(20):
        spec, vols, confs = _sensors(rng, 3, (8, 7, 6))
        out = fuse_weighted(vols, [ConfidenceVolume.ones(spec) for _ in vols])
        seen = [(v.weights > 0).astype(float) for v in vols]
        den = sum(seen)
        num = sum(m * v.values for m, v in zip(seen, vols))
        expected = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        exact &= bool(np.array_equal(out.values, expected))
        a = fuse_weighted(vols, confs).values
        for scale in (1e-3, 0.37, 5.0, 1e3):
            b = fuse_weighted(vols, [ConfidenceVolume(spec, c.conf * scale) for c in confs]).values
            scale_err = max(scale_err, float(np.max(np.abs(a - b))))
    spec, vols, confs = _sensors(np.random.default_rng(0), 2, (64, 64, 64))
    start = time.perf_counter()
    fuse_weighted(vols, confs)
    seconds = time.perf_counter() - start
    ok = exact and scale_err <= 1e-12 and seconds < 1.0
    report(1, ok, f"masked mean exact={exact}, rescale error {scale_err:.2e} (<=1e-12), 64^3 fuse {seconds:.3f} s (<1 s)")


# --- 2 -----------------------------------------------------------------------------


def _mlp_error(seed=3):
    rng = np.random.default_rng(seed)
    p = init_params(seed, (11, 8, 6, 4, 1))
    p.weights[-1] = rng.uniform(0.2, 1.0, p.weights[-1].shape)
    for b in p.biases:
        b += rng.uniform(0.1, 0.3, b.shape)
    x = rng.uniform(0, 1, (5, 11))
    up = rng.normal(size=5)
    g = mlp_backward(p, x, up)

    def f():
        return float(np.sum(up * mlp_forward(p, x)))

    errs = [rel_error(ga, numeric_grad(f, arr)) for arr, ga in zip(p.arrays(), g.arrays())]
    return max(errs)


def _conv_error(seed=4):
    rng = np.random.default_rng(seed)
    k = rng.normal(size=(6, 2, 3, 3, 3))
    u = rng.normal(size=(2, 4, 3, 5))
    g = rng.normal(size=(6, 4, 3, 5))
    analytic_k = kernel_gradient(u, g)
    num_k = numeric_grad(lambda: float(np.sum(g * apply_W(k, u))), k)
    analytic_u = apply_W_adjoint(k, g)
    num_u = numeric_grad(lambda: float(np.sum(g * apply_W(k, u))), u)
    return max(rel_error(analytic_k, num_k), rel_error(analytic_u, num_u))


def test_criterion_2_gradient_suite():
    start = time.perf_counter()
    mlp = _mlp_error()
    conv = _conv_error()
    solver = max(solver_gradient_errors(0))
    chain = max(full_chain_errors(0).values())
    seconds = time.perf_counter() - start
    ok = mlp < 1e-4 and conv < 1e-3 and solver < 1e-3 and chain < 1e-3 and seconds < 300
    report(
        2,
        ok,
        f"rel errors: mlp {mlp:.1e} (<1e-4), conv {conv:.1e}, solver {solver:.1e}, "
        f"full chain {chain:.1e} (<1e-3); {seconds:.0f} s (<300 s)",
    )


# --- 3 -----------------------------------------------------------------------------


def test_criterion_3_feasibility_and_projections():
    labels = 6
    W = RegularizerW.forward_difference(labels, 0.2, sigma=0.1, tau=0.1)
    box = 0.0
    ball = 0.0
    residual = 0.0

    def watch(state):
        nonlocal box, ball
        box = max(box, float(-state.u.min()), float(state.u.max() - 1.0))
        ball = max(ball, float(group_norms(state.xi).max() - 1.0))

    for seed in range(100):
        cost = np.random.default_rng(seed).uniform(-1, 1, (labels, 4, 4, 4))
        u = solve_array(cost, W, 200, callback=watch)
        residual = max(residual, constraint_residual(u))
    ok = residual <= 1e-2 and box <= 0.0 and ball <= 1e-12
    report(
        3,
        ok,
        f"max |sum u - 1| {residual:.4f} (<=1e-2), box violation {box:.1e} (0), "
        f"ball excess {ball:.1e} (<=1e-12)",
    )


# --- 4 -----------------------------------------------------------------------------


def test_criterion_4_exhaustive_oracle():
    hits = exhaustive_matches(100)
    report(4, hits >= 90, f"{hits}/100 relaxed solutions match the exhaustive minimizer (>=90)")


# --- 5 -----------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_desk_benchmark():
    start = time.perf_counter()
    result = run_benchmark(BenchmarkConfig())
    minutes = (time.perf_counter() - start) / 60
    per_seed = "; ".join(
        f"seed {r.seed}: SA {r.sa_learned:.4f} vs frozen {r.sa_frozen:.4f} "
        f"(gain {r.sa_learned - r.sa_frozen:+.4f}, need >=0.02), outlier confidence ratio "
        f"{r.confidence_ratio:.3f} (need <=0.7)"
        for r in result.seeds
    )
    passed = sum(r.passed for r in result.seeds)
    report(5, result.passed, f"{passed}/3 seeds pass (need >=2); {per_seed}; {minutes:.0f} min")


# --- 6 -----------------------------------------------------------------------------


def test_criterion_6_tsdf_fidelity():
    start = time.perf_counter()
    scene = random_scene(0)
    perfect = SensorModel("perfect", (NoiseComponent("perfect"),))
    poses = generate_trajectory(scene, 24, 0)
    views = simulate_sensor(scene, perfect, poses, default_intrinsics(), 0)
    tsdf = TsdfVolume(scene.spec, 3 * scene.voxel_size)
    for v in views:
        integrate_depth_map(tsdf, v.depth, v.intr, v.pose)
    fidelity = surface_fidelity(tsdf, ground_truth(scene), views)
    seconds = time.perf_counter() - start
    ok = fidelity >= 0.99 and seconds < 30
    report(6, ok, f"{100 * fidelity:.2f}% of observed GT surface within 1 voxel (>=99%), {seconds:.1f} s (<30 s)")


# --- 7 -----------------------------------------------------------------------------


def _pipeline(root):
    root.mkdir()
    (root / "scene.json").write_text(json.dumps({"random_seed": 0, "trajectory": {"views": 6, "seed": 0}}))
    steps = [
        ["simulate", "--scene", str(root / "scene.json"), "--out", str(root / "sim")],
        ["fuse", "--input", str(root / "sim"), "--out", str(root / "fused")],
        ["train", "--input", str(root / "fused"), "--epochs", "2", "--iterations", "10", "--out", str(root / "run")],
        ["reconstruct", "--input", str(root / "fused"), "--checkpoint", str(root / "run" / "model.ckpt"),
         "--out", str(root / "pred.vol")],
        ["eval", "--input", str(root / "pred.vol"), "--gt", str(root / "fused" / "gt.vol"), "--out", str(root / "eval.txt")],
    ]  # fmt: skip
    for argv in steps:
        if cli_main(argv + ["--seed", "5"]) != 0:
            raise RuntimeError(f"command failed: {argv[0]}")
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_7_determinism(tmp_path):
    first = _pipeline(tmp_path / "one")
    second = _pipeline(tmp_path / "two")
    differing = sorted(str(k) for k in first if first[k] != second.get(k))
    ok = first.keys() == second.keys() and not differing
    report(7, ok, f"{len(first)} artifacts from simulate/fuse/train/reconstruct/eval, {len(differing)} differ")


# --- 8 -----------------------------------------------------------------------------


def test_criterion_8_outlier_frequency():
    n = 1_000_000
    depth = np.full(n, 3.0)
    out = corrupt(depth, [NoiseComponent("outlier", p=0.01, sigma_out=2.0)], np.random.default_rng(2024))
    hits = int(np.sum(out != depth))
    bound = binomial_bound(n, 0.01)
    ok = abs(hits - 0.01 * n) <= bound
    report(8, ok, f"{hits} outliers in {n} samples, |{hits} - {int(0.01 * n)}| <= {bound:.1f}")
