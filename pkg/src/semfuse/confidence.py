"""Per-sensor confidence network: a small ReLU MLP applied voxel-wise.

All functions accept a single feature vector ``(m,)`` or a batch ``(N, m)``.
Gradients for a batch are summed over rows.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .fusion import ContractError

DEFAULT_WIDTHS = (100, 50, 20, 10, 1)


@dataclasses.dataclass
class MlpParams:
    """Layer ``k`` computes ``relu(weights[k] @ h + biases[k])``; ``weights[k]`` is ``(out, in)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    sensor: str = ""

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractError("need matching, non-empty weight and bias lists")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ContractError(f"layer {k}: bias {b.shape} vs weight {w.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ContractError(f"layer {k} input width does not match layer {k - 1}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> MlpParams:
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.sensor)


@dataclasses.dataclass
class MlpGradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_params(seed, layer_widths, sensor: str = "") -> MlpParams:
    """He-normal hidden layers; the output layer starts at weight 0, bias 1.

    ``layer_widths`` includes the input width, e.g. ``(11, 100, 50, 20, 10, 1)``.
    """
    widths = tuple(int(w) for w in layer_widths)
    if len(widths) < 2:
        raise ContractError("need an input width and at least one layer")
    if widths[-1] != 1:
        raise ContractError("the last layer must have a single output")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-2], widths[1:-1]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    weights.append(np.zeros((1, widths[-2])))
    biases.append(np.ones(1))
    return MlpParams(weights, biases, sensor)


def _forward_all(params: MlpParams, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    for w, b in zip(params.weights, params.biases):
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    return pre, acts


def _as_batch(params: MlpParams, features):
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.weights[0].shape[1]:
        raise ContractError(
            f"feature width {x.shape[1]} != network input {params.weights[0].shape[1]}"
        )
    return x, single


def forward(params: MlpParams, features):
    """Confidence ``>= 0`` per feature row (ReLU after every layer)."""
    x, single = _as_batch(params, features)
    _, acts = _forward_all(params, x)
    out = acts[-1][:, 0]
    return float(out[0]) if single else out


def backward(params: MlpParams, features, upstream) -> MlpGradients:
    """Gradient of ``sum(upstream * forward(features))``; ReLU'(0) is taken as 0."""
    x, single = _as_batch(params, features)
    pre, acts = _forward_all(params, x)
    g = np.asarray(upstream, dtype=np.float64).reshape(-1, 1) * np.ones((x.shape[0], 1))
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for k in range(len(params.weights) - 1, -1, -1):
        gz = g * (pre[k] > 0)
        gw[k] = gz.T @ acts[k]
        gb[k] = gz.sum(axis=0)
        g = gz @ params.weights[k]
    return MlpGradients(gw, gb, g[0] if single else g)
