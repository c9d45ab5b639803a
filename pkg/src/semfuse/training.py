"""End-to-end training of confidence networks and the unrolled solver.

Forward chain per crop::

    features -> per-sensor MLP confidences -> combined datacost -> solver -> loss

and the backward pass walks the same chain in reverse. All randomness comes
from ``numpy.random.Generator`` streams derived from one seed.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from . import confidence as mlp
from .fusion import FREE_LABEL, ContractError, combine_costs, combine_costs_backward
from .varsolver import RegularizerW, SolverConfig, solve_array, solve_backward, solve_multilevel

log = logging.getLogger(__name__)

EPS_LOG = 1e-7
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    """Raised on a non-finite loss; ``state`` holds the offending crop and parameters."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclasses.dataclass
class TrainingConfig:
    lr: float = 1e-4
    batch_size: int = 4
    crop: int = 24
    lambda_f: float = 1.5
    epochs: int = 1000
    seed: int = 0
    solver: SolverConfig = dataclasses.field(default_factory=SolverConfig)
    eps_log: float = EPS_LOG
    learn_confidence: bool = True
    learn_steps: bool = True
    crops_per_scene: int = 1
    hidden_widths: tuple[int, ...] = (100, 50, 20, 10)
    w_init: str = "tv"
    w_init_weight: float = 0.1

    def __post_init__(self):
        if isinstance(self.solver, dict):
            self.solver = SolverConfig(**self.solver)
        self.hidden_widths = tuple(self.hidden_widths)
        for name in ("batch_size", "crop", "lambda_f", "eps_log", "crops_per_scene"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d


# --- loss ----------------------------------------------------------------------


def _loss_masks(u: np.ndarray, gt: np.ndarray):
    if u.shape[1:] != gt.shape:
        raise ContractError(f"prediction {u.shape[1:]} and ground truth {gt.shape} differ")
    occ = gt > FREE_LABEL
    free = gt == FREE_LABEL
    return occ, free


def loss(u: np.ndarray, gt: np.ndarray, lambda_f: float = 1.5, eps: float = EPS_LOG):
    """Returns ``(L, L_s, L_f)`` with ``L = L_s + lambda_f * L_f``; unknown voxels ignored."""
    occ, free = _loss_masks(u, gt)
    if occ.any():
        p = np.take_along_axis(u, np.where(occ, gt, 0)[None], axis=0)[0][occ]
        ls = float(np.mean(-np.log(np.maximum(p, eps))))
    else:
        log.debug("crop has no occupied voxels; semantic loss set to 0")
        ls = 0.0
    if free.any():
        lf = float(np.mean(-np.log(np.maximum(u[FREE_LABEL][free], eps))))
    else:
        log.debug("crop has no free voxels; free-space loss set to 0")
        lf = 0.0
    return ls + lambda_f * lf, ls, lf


def loss_backward(u: np.ndarray, gt: np.ndarray, lambda_f: float = 1.5, eps: float = EPS_LOG) -> np.ndarray:
    occ, free = _loss_masks(u, gt)
    grad = np.zeros_like(u)
    n_s, n_f = int(occ.sum()), int(free.sum())
    if n_s:
        lab = np.where(occ, gt, 0)
        p = np.take_along_axis(u, lab[None], axis=0)[0]
        g = np.where(occ & (p > eps), -1.0 / (n_s * np.maximum(p, eps)), 0.0)
        np.put_along_axis(grad, lab[None], g[None], axis=0)
    if n_f:
        p = u[FREE_LABEL]
        grad[FREE_LABEL] += np.where(free & (p > eps), -lambda_f / (n_f * np.maximum(p, eps)), 0.0)
    return grad


# --- augmentation --------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Transform:
    """Rotation by ``k * 90`` degrees about z, then optional flips along x and y."""

    k: int = 0
    flip_x: bool = False
    flip_y: bool = False

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Transform the last three (spatial ``x, y, z``) axes of ``a``."""
        ax = a.ndim - 3
        out = np.rot90(a, self.k, axes=(ax, ax + 1))
        if self.flip_x:
            out = np.flip(out, axis=ax)
        if self.flip_y:
            out = np.flip(out, axis=ax + 1)
        return np.ascontiguousarray(out)


def random_transform(rng: np.random.Generator) -> Transform:
    return Transform(int(rng.integers(4)), bool(rng.integers(2)), bool(rng.integers(2)))


@dataclasses.dataclass
class SceneData:
    """Per-scene training inputs: per-sensor costs, features and view counts plus GT."""

    costs: list[np.ndarray]
    features: list[np.ndarray]
    counts: list[np.ndarray]
    gt: np.ndarray
    name: str = ""

    @property
    def dims(self):
        return self.gt.shape

    @property
    def n_sensors(self) -> int:
        return len(self.costs)


def crop_corner_range(dims, crop: int):
    if crop > min(dims):
        raise ContractError(f"crop {crop} exceeds grid {tuple(dims)}")
    return tuple(d - crop for d in dims)


def sample_crop(scene: SceneData, crop: int, rng: np.random.Generator, transform: Transform | None = None):
    """Uniform random cube crop, then one random symmetry applied to every volume."""
    hi = crop_corner_range(scene.dims, crop)
    corner = tuple(int(rng.integers(0, h + 1)) for h in hi)
    tf = random_transform(rng) if transform is None else transform
    sl = tuple(slice(c, c + crop) for c in corner)

    def cut(a):
        return tf.apply(a[(Ellipsis,) + sl])

    out = SceneData(
        [cut(c) for c in scene.costs],
        [cut(f) for f in scene.features],
        [cut(n) for n in scene.counts],
        cut(scene.gt),
        scene.name,
    )
    return out, corner, tf


# --- model ---------------------------------------------------------------------


@dataclasses.dataclass
class FusionModel:
    mlps: list[mlp.MlpParams]
    W: RegularizerW

    @classmethod
    def create(cls, n_sensors: int, feature_dims, n_labels: int, config: TrainingConfig) -> FusionModel:
        if isinstance(feature_dims, int):
            feature_dims = [feature_dims] * n_sensors
        mlps = [
            mlp.init_params(config.seed, (m,) + config.hidden_widths + (1,), sensor=str(i))
            for i, m in enumerate(feature_dims)
        ]
        if config.w_init == "zero":
            W = RegularizerW.zeros(n_labels)
        elif config.w_init == "tv":
            W = RegularizerW.forward_difference(n_labels, config.w_init_weight)
        else:
            raise ValueError(f"unknown regularizer init {config.w_init!r}")
        return cls(mlps, W)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for s, p in enumerate(self.mlps):
            for k, (w, b) in enumerate(zip(p.weights, p.biases)):
                out[f"mlp{s}.w{k}"] = w
                out[f"mlp{s}.b{k}"] = b
        out["W.kernel"] = self.W.kernel
        out["W.log_sigma"] = np.array(self.W.log_sigma)
        out["W.log_tau"] = np.array(self.W.log_tau)
        return out

    @classmethod
    def from_named_arrays(cls, arrays: dict[str, np.ndarray]) -> FusionModel:
        mlps = []
        s = 0
        while f"mlp{s}.w0" in arrays:
            ws, bs = [], []
            k = 0
            while f"mlp{s}.w{k}" in arrays:
                ws.append(np.array(arrays[f"mlp{s}.w{k}"], dtype=np.float64))
                bs.append(np.array(arrays[f"mlp{s}.b{k}"], dtype=np.float64))
                k += 1
            mlps.append(mlp.MlpParams(ws, bs, str(s)))
            s += 1
        W = RegularizerW(
            np.array(arrays["W.kernel"], dtype=np.float64),
            float(arrays["W.log_sigma"]),
            float(arrays["W.log_tau"]),
        )
        return cls(mlps, W)

    def copy(self) -> FusionModel:
        return FusionModel([p.copy() for p in self.mlps], self.W.copy())


def confidences(model: FusionModel, features: list[np.ndarray], counts: list[np.ndarray]):
    """Per-sensor confidence volumes; unobserved voxels share the output for zero features."""
    out = []
    for params, feats, count in zip(model.mlps, features, counts):
        seen = count > 0
        zero = mlp.forward(params, np.zeros(feats.shape[0]))
        conf = np.full(count.shape, zero)
        if seen.any():
            conf[seen] = mlp.forward(params, feats[:, seen].T)
        out.append(conf)
    return out


def _confidence_backward(params, feats, count, g_conf):
    seen = count > 0
    zero_rows = np.zeros((1, feats.shape[0]))
    grads = mlp.backward(params, zero_rows, np.array([g_conf[~seen].sum()]))
    if seen.any():
        g_seen = mlp.backward(params, feats[:, seen].T, g_conf[seen])
        grads = mlp.MlpGradients(
            [a + b for a, b in zip(grads.weights, g_seen.weights)],
            [a + b for a, b in zip(grads.biases, g_seen.biases)],
            None,
        )
    return grads


def forward_backward(model: FusionModel, sample: SceneData, config: TrainingConfig, need_grad: bool = True):
    """Loss and gradients (keyed like ``model.named_arrays()``) for one crop."""
    if config.learn_confidence:
        confs = confidences(model, sample.features, sample.counts)
    else:
        confs = [np.ones(sample.dims) for _ in sample.costs]
    cost = combine_costs(sample.costs, confs)
    iters = config.solver.iterations
    if not need_grad:
        u = solve_array(cost, model.W, iters)
        return loss(u, sample.gt, config.lambda_f, config.eps_log), None, u
    u, tape = solve_array(cost, model.W, iters, record=True)
    value = loss(u, sample.gt, config.lambda_f, config.eps_log)
    g_u = loss_backward(u, sample.gt, config.lambda_f, config.eps_log)
    sg = solve_backward(tape, g_u)
    g_kernel, g_ls, g_lt = sg.for_params(model.W)
    grads = {name: np.zeros_like(a) for name, a in model.named_arrays().items()}
    grads["W.kernel"] = g_kernel
    if config.learn_steps:
        grads["W.log_sigma"] = np.array(g_ls)
        grads["W.log_tau"] = np.array(g_lt)
    if config.learn_confidence:
        g_confs = combine_costs_backward(sample.costs, sg.cost)
        for s, (params, feats, count, gc) in enumerate(
            zip(model.mlps, sample.features, sample.counts, g_confs)
        ):
            mg = _confidence_backward(params, feats, count, gc)
            for k, (gw, gb) in enumerate(zip(mg.weights, mg.biases)):
                grads[f"mlp{s}.w{k}"] = gw
                grads[f"mlp{s}.b{k}"] = gb
    return value, grads, u


# --- optimizer -----------------------------------------------------------------


@dataclasses.dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> AdamState:
        return cls(
            {k: np.zeros_like(a) for k, a in arrays.items()},
            {k: np.zeros_like(a) for k, a in arrays.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    t = state.step + 1
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(m_out, v_out, t)


# --- loop ----------------------------------------------------------------------


@dataclasses.dataclass
class EpochStats:
    epoch: int
    loss: float
    loss_s: float
    loss_f: float
    sigma: float
    tau: float


class Trainer:
    """Owns the model, optimizer state and epoch counter."""

    def __init__(self, model: FusionModel, config: TrainingConfig, adam: AdamState | None = None, epoch: int = 0):
        self.model = model
        self.config = config
        self.adam = adam or AdamState.zeros_like(model.named_arrays())
        self.epoch = epoch
        self.history: list[EpochStats] = []

    def train_epoch(self, scenes: list[SceneData]) -> EpochStats:
        """One pass over all scenes (``crops_per_scene`` crops each), batched."""
        if not scenes:
            raise ContractError("need at least one scene")
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, self.epoch])
        order = [i for i in rng.permutation(len(scenes)) for _ in range(cfg.crops_per_scene)]
        totals = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grad_sum = None
            for j, scene_idx in enumerate(batch):
                crop_rng = np.random.default_rng([cfg.seed, self.epoch, start + j])
                sample, corner, tf = sample_crop(scenes[scene_idx], cfg.crop, crop_rng)
                value, grads, _ = forward_backward(self.model, sample, cfg)
                if not np.isfinite(value[0]):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {self.epoch}, scene {scene_idx}",
                        {
                            "epoch": self.epoch,
                            "scene": scene_idx,
                            "corner": corner,
                            "transform": tf,
                            "params": self.model.named_arrays(),
                        },
                    )
                totals += value
                if grad_sum is None:
                    grad_sum = grads
                else:
                    for name in grad_sum:
                        grad_sum[name] = grad_sum[name] + grads[name]
            grads = {k: g / len(batch) for k, g in grad_sum.items()}
            params, self.adam = adam_step(self.model.named_arrays(), grads, self.adam, cfg.lr)
            self.model = FusionModel.from_named_arrays(params)
        self.epoch += 1
        mean = totals / len(order)
        stats = EpochStats(self.epoch, *map(float, mean), self.model.W.sigma, self.model.W.tau)
        self.history.append(stats)
        return stats

    def fit(self, scenes: list[SceneData], epochs: int | None = None, callback=None):
        for _ in range(self.config.epochs if epochs is None else epochs):
            stats = self.train_epoch(scenes)
            if callback is not None:
                callback(stats)
        return self.history


def predict(model: FusionModel, scene: SceneData, iterations: int, levels: int = 1, learn_confidence: bool = True):
    """Full-volume relaxed labeling and the confidences used to build it."""
    if learn_confidence:
        confs = confidences(model, scene.features, scene.counts)
    else:
        confs = [np.ones(scene.dims) for _ in scene.costs]
    cost = combine_costs(scene.costs, confs)
    u = solve_multilevel(cost, model.W, iterations, levels)
    return u, confs


def train_epoch(scenes, model: FusionModel, config: TrainingConfig, adam: AdamState | None = None, epoch: int = 0):
    """Functional form of ``Trainer.train_epoch``: returns ``(model, adam, stats)``."""
    trainer = Trainer(model, config, adam, epoch)
    stats = trainer.train_epoch(scenes)
    return trainer.model, trainer.adam, stats
