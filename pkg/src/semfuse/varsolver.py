"""Unrolled primal-dual solver for convex multi-label segmentation.

Minimizes ``sum_x sum_l ||(W u)_l(x)||_2 + <D, u>`` subject to
``u in [0, 1]`` and ``sum_l u_l = 1`` (enforced through a multiplier ``nu``).
``W`` is a learned 3x3x3 convolution from ``L`` label channels to ``3 L``
channels; output channels ``3l .. 3l+2`` form the group of label ``l``.

Arrays are channel-first: ``u`` is ``(L, nx, ny, nz)``, the dual ``xi`` is
``(3L, nx, ny, nz)``. Every forward iteration can be recorded on a tape so
that ``solve_backward`` differentiates through all unrolled steps exactly.
"""

from __future__ import annotations

import dataclasses
from itertools import product

import numpy as np
from scipy import ndimage

from .fusion import ContractError, SemanticDatacost
from .geometry import VoxelGridSpec

OFFSETS = list(product(range(3), repeat=3))
DEFAULT_STEP = 0.1


@dataclasses.dataclass
class RegularizerW:
    """Convolution kernel ``(3L, L, 3, 3, 3)`` plus log step sizes."""

    kernel: np.ndarray
    log_sigma: float = float(np.log(DEFAULT_STEP))
    log_tau: float = float(np.log(DEFAULT_STEP))

    def __post_init__(self):
        k = self.kernel
        if k.ndim != 5 or k.shape[2:] != (3, 3, 3) or k.shape[0] != 3 * k.shape[1]:
            raise ContractError(f"kernel shape {k.shape} is not (3L, L, 3, 3, 3)")
        if not np.all(np.isfinite(k)):
            raise ContractError("kernel entries must be finite")

    @property
    def n_labels(self) -> int:
        return self.kernel.shape[1]

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau))

    @classmethod
    def zeros(cls, n_labels: int, sigma=DEFAULT_STEP, tau=DEFAULT_STEP) -> RegularizerW:
        return cls(np.zeros((3 * n_labels, n_labels, 3, 3, 3)), np.log(sigma), np.log(tau))

    @classmethod
    def forward_difference(
        cls, n_labels: int, weight: float = 1.0, sigma=DEFAULT_STEP, tau=DEFAULT_STEP
    ) -> RegularizerW:
        """Per-label forward differences along x, y, z scaled by ``weight``."""
        k = np.zeros((3 * n_labels, n_labels, 3, 3, 3))
        for lab in range(n_labels):
            for axis in range(3):
                fwd = [1, 1, 1]
                fwd[axis] = 2
                k[3 * lab + axis, lab, 1, 1, 1] = -weight
                k[(3 * lab + axis, lab) + tuple(fwd)] = weight
        return cls(k, np.log(sigma), np.log(tau))

    def copy(self) -> RegularizerW:
        return RegularizerW(self.kernel.copy(), self.log_sigma, self.log_tau)


@dataclasses.dataclass
class SolverConfig:
    iterations: int = 50
    levels: int = 1
    tolerance: float = 1e-2

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")


@dataclasses.dataclass
class LabelVolume:
    spec: VoxelGridSpec
    labels: tuple[str, ...]
    u: np.ndarray


@dataclasses.dataclass
class SolverState:
    u: np.ndarray
    ubar: np.ndarray
    xi: np.ndarray
    nu: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, n_labels: int, dims) -> SolverState:
        u = np.full((n_labels,) + tuple(dims), 1.0 / n_labels)
        return cls(u, u.copy(), np.zeros((3 * n_labels,) + tuple(dims)), np.zeros(tuple(dims)))

    @classmethod
    def warm(cls, u0: np.ndarray) -> SolverState:
        n = u0.shape[0]
        dims = u0.shape[1:]
        return cls(u0.copy(), u0.copy(), np.zeros((3 * n,) + dims), np.zeros(dims))


# --- convolution -------------------------------------------------------------


class _FlatGrid:
    """Padded grid flattened so that every stencil offset is one contiguous shift.

    Voxel ``(i, j, k)`` of the unpadded grid sits at flat position
    ``q = i * sx + j * sy + k``; its neighbor at offset ``(dx, dy, dz)`` in the
    one-voxel padded copy sits at ``q + dx * sx + dy * sy + dz``.
    """

    def __init__(self, dims):
        self.dims = tuple(dims)
        self.padded = tuple(d + 2 for d in self.dims)
        sx, sy = self.padded[1] * self.padded[2], self.padded[2]
        self.size = self.padded[0] * sx
        self.shifts = [dx * sx + dy * sy + dz for dx, dy, dz in OFFSETS]
        self.span = self.size - self.shifts[-1]

    def embed(self, a: np.ndarray) -> np.ndarray:
        """``(C, *dims)`` placed at the low corner of a zeroed padded grid, flattened."""
        out = np.zeros((a.shape[0],) + self.padded)
        out[:, : self.dims[0], : self.dims[1], : self.dims[2]] = a
        return out.reshape(a.shape[0], -1)

    def extract(self, flat: np.ndarray) -> np.ndarray:
        full = np.zeros((flat.shape[0], self.size))
        full[:, : self.span] = flat
        full = full.reshape((flat.shape[0],) + self.padded)
        return np.ascontiguousarray(full[:, : self.dims[0], : self.dims[1], : self.dims[2]])

    def pad(self, u: np.ndarray) -> np.ndarray:
        """Edge padding: replicating the border keeps difference stencils at zero
        across the grid boundary (Neumann condition), so constant labelings cost
        nothing there."""
        return np.pad(u, ((0, 0), (1, 1), (1, 1), (1, 1)), mode="edge").reshape(u.shape[0], -1)

    def patches(self, u: np.ndarray) -> np.ndarray:
        """im2col over the flat layout: ``(27 * C, span)``."""
        src = self.pad(u)
        out = np.empty((27, u.shape[0], self.span))
        for k, s in enumerate(self.shifts):
            out[k] = src[:, s : s + self.span]
        return out.reshape(27 * u.shape[0], self.span)


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """``(out, 27 * in)`` with offset-major columns, matching ``_FlatGrid.patches``."""
    n_out, n_in = kernel.shape[:2]
    return kernel.reshape(n_out, n_in, 27).transpose(0, 2, 1).reshape(n_out, 27 * n_in)


def _check(kernel, u, channels_axis_size):
    if u.ndim != 4 or u.shape[0] != channels_axis_size:
        raise ContractError(f"volume with {u.shape[0]} channels, expected {channels_axis_size}")


def _fold_edges(pad: np.ndarray) -> np.ndarray:
    """Adjoint of one-voxel edge padding: border pads add back onto their source."""
    out = pad
    for axis in (1, 2, 3):
        core = np.take(out, np.arange(1, out.shape[axis] - 1), axis=axis).copy()
        first = [slice(None)] * 4
        last = [slice(None)] * 4
        first[axis], last[axis] = 0, -1
        core[tuple(first)] += np.take(out, 0, axis=axis)
        core[tuple(last)] += np.take(out, -1, axis=axis)
        out = core
    return out


def apply_W(W: RegularizerW | np.ndarray, u: np.ndarray) -> np.ndarray:
    """Edge-padded 3x3x3 convolution ``(L, ...) -> (3L, ...)``."""
    kernel = W.kernel if isinstance(W, RegularizerW) else W
    _check(kernel, u, kernel.shape[1])
    grid = _FlatGrid(u.shape[1:])
    return grid.extract(_kernel_matrix(kernel) @ grid.patches(u))


def apply_W_adjoint(W: RegularizerW | np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Exact adjoint of ``apply_W`` under the Euclidean inner product."""
    kernel = W.kernel if isinstance(W, RegularizerW) else W
    _check(kernel, xi, kernel.shape[0])
    n_in = kernel.shape[1]
    grid = _FlatGrid(xi.shape[1:])
    cols = (_kernel_matrix(kernel).T @ grid.embed(xi)[:, : grid.span]).reshape(27, n_in, grid.span)
    pad = np.zeros((n_in, grid.size))
    for k, s in enumerate(grid.shifts):
        pad[:, s : s + grid.span] += cols[k]
    return _fold_edges(pad.reshape((n_in,) + grid.padded))


def kernel_gradient(u: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    """Gradient of ``<g_out, apply_W(K, u)>`` with respect to ``K``."""
    n_in, n_out = u.shape[0], g_out.shape[0]
    grid = _FlatGrid(u.shape[1:])
    gm = grid.embed(g_out)[:, : grid.span] @ grid.patches(u).T
    return gm.reshape(n_out, 27, n_in).transpose(0, 2, 1).reshape(n_out, n_in, 3, 3, 3)


def group_norms(xi: np.ndarray) -> np.ndarray:
    """Per-voxel l2 norm of every 3-channel label group, shape ``(L, ...)``."""
    g = xi.reshape((xi.shape[0] // 3, 3) + xi.shape[1:])
    return np.sqrt(np.sum(g * g, axis=1))


def project_ball(xi: np.ndarray) -> np.ndarray:
    n = group_norms(xi)
    scale = 1.0 / np.maximum(n, 1.0)
    return xi * np.repeat(scale, 3, axis=0)


# --- forward -----------------------------------------------------------------


@dataclasses.dataclass
class _Step:
    ubar: np.ndarray
    w_ubar: np.ndarray
    resid: np.ndarray
    a: np.ndarray
    a_norm: np.ndarray
    xi: np.ndarray
    direction: np.ndarray
    active: np.ndarray


@dataclasses.dataclass
class SolverTape:
    """Everything ``solve_backward`` needs from a recorded forward run."""

    kernel: np.ndarray
    sigma: float
    tau: float
    steps: list[_Step]
    u: np.ndarray


def _iterate(state: SolverState, cost, kernel, sigma, tau, tape: list | None = None):
    u, ubar, xi, nu = state.u, state.ubar, state.xi, state.nu
    resid = ubar.sum(axis=0) - 1.0
    nu_new = nu + sigma * resid
    w_ubar = apply_W(kernel, ubar)
    a = xi + sigma * w_ubar
    a_norm = group_norms(a)
    xi_new = a * np.repeat(1.0 / np.maximum(a_norm, 1.0), 3, axis=0)
    direction = apply_W_adjoint(kernel, xi_new) + nu_new[None] + cost
    b = u - tau * direction
    u_new = np.clip(b, 0.0, 1.0)
    ubar_new = 2.0 * u_new - u
    if tape is not None:
        tape.append(
            _Step(ubar, w_ubar, resid, a, a_norm, xi_new, direction, (b > 0.0) & (b < 1.0))
        )
    return SolverState(u_new, ubar_new, xi_new, nu_new, state.t + 1)


def _cost_array(datacost) -> np.ndarray:
    return datacost.cost if isinstance(datacost, SemanticDatacost) else np.asarray(datacost)


def pd_iteration(state: SolverState, datacost, W: RegularizerW) -> SolverState:
    """One primal-dual update: multiplier, dual ascent + ball projection, primal descent + box projection, over-relaxation."""
    cost = _cost_array(datacost)
    if cost.shape != state.u.shape or W.n_labels != cost.shape[0]:
        raise ContractError("datacost, state and regularizer disagree on shape")
    return _iterate(state, cost, W.kernel, W.sigma, W.tau)


def solve_array(
    cost: np.ndarray,
    W: RegularizerW,
    iterations: int,
    u0: np.ndarray | None = None,
    record: bool = False,
    callback=None,
):
    """Run ``iterations`` unrolled updates on a raw cost array.

    Returns ``u`` or, with ``record=True``, ``(u, tape)``.
    """
    if W.n_labels != cost.shape[0]:
        raise ContractError(f"regularizer has {W.n_labels} labels, datacost {cost.shape[0]}")
    if u0 is None:
        state = SolverState.initial(cost.shape[0], cost.shape[1:])
    else:
        state = SolverState.warm(u0)
    steps = [] if record else None
    sigma, tau = W.sigma, W.tau
    for _ in range(iterations):
        state = _iterate(state, cost, W.kernel, sigma, tau, steps)
        if callback is not None:
            callback(state)
    if record:
        return state.u, SolverTape(W.kernel, sigma, tau, steps, state.u)
    return state.u


def _downsample(cost: np.ndarray) -> np.ndarray:
    dims = cost.shape[1:]
    padded = np.pad(cost, [(0, 0)] + [(0, d % 2) for d in dims])
    n = padded.shape
    return padded.reshape(n[0], n[1] // 2, 2, n[2] // 2, 2, n[3] // 2, 2).sum(axis=(2, 4, 6))


def _upsample(u: np.ndarray, dims) -> np.ndarray:
    zoom = [1.0] + [d / s for d, s in zip(dims, u.shape[1:])]
    up = ndimage.zoom(u, zoom, order=1, mode="nearest", grid_mode=True)
    return np.clip(up, 0.0, 1.0)


def solve_multilevel(cost: np.ndarray, W: RegularizerW, iterations: int, levels: int) -> np.ndarray:
    """Coarse-to-fine approximation: each coarser level warm-starts the next.

    Forward only; training uses the single-level solver.
    """
    if levels <= 1 or min(cost.shape[1:]) < 2:
        return solve_array(cost, W, iterations)
    coarse = solve_multilevel(_downsample(cost), W, iterations, levels - 1)
    return solve_array(cost, W, iterations, u0=_upsample(coarse, cost.shape[1:]))


def solve(datacost: SemanticDatacost, W: RegularizerW, config: SolverConfig | None = None) -> LabelVolume:
    config = config or SolverConfig()
    cost = datacost.cost
    if not np.all(np.isfinite(cost)):
        raise ContractError("datacost must be finite")
    if config.levels > 1:
        u = solve_multilevel(cost, W, config.iterations, config.levels)
    else:
        u = solve_array(cost, W, config.iterations)
    return LabelVolume(datacost.spec, datacost.labels, u)


def energy(u, datacost, W: RegularizerW) -> float:
    """Primal objective (diagnostic): group-norm regularizer plus linear data term."""
    u = u.u if isinstance(u, LabelVolume) else u
    cost = _cost_array(datacost)
    return float(group_norms(apply_W(W, u)).sum() + np.sum(cost * u))


def extract_labels(u) -> np.ndarray:
    """Per-voxel argmax; ties go to the lowest label index."""
    u = u.u if isinstance(u, LabelVolume) else u
    return np.argmax(u, axis=0)


def constraint_residual(u: np.ndarray) -> float:
    return float(np.max(np.abs(u.sum(axis=0) - 1.0)))


# --- reverse mode ------------------------------------------------------------


@dataclasses.dataclass
class SolverGradients:
    cost: np.ndarray
    kernel: np.ndarray
    sigma: float
    tau: float

    def for_params(self, W: RegularizerW):
        """Gradients with respect to ``(kernel, log_sigma, log_tau)``."""
        return self.kernel, self.sigma * W.sigma, self.tau * W.tau


def solve_backward(tape: SolverTape, grad_u: np.ndarray) -> SolverGradients:
    """Reverse-mode pass through every recorded iteration.

    Clamp derivative is 0 wherever the box projection was active; the ball
    projection is treated as the identity when the group norm is <= 1.
    """
    kernel, sigma, tau = tape.kernel, tape.sigma, tape.tau
    g_u = np.array(grad_u, dtype=np.float64)
    g_ubar = np.zeros_like(g_u)
    g_xi = np.zeros((kernel.shape[0],) + g_u.shape[1:])
    g_nu = np.zeros(g_u.shape[1:])
    g_cost = np.zeros_like(g_u)
    g_kernel = np.zeros_like(kernel)
    g_sigma = 0.0
    g_tau = 0.0

    for step in reversed(tape.steps):
        # ubar' = 2 u' - u
        g_unew = g_u + 2.0 * g_ubar
        g_u_in = -g_ubar
        # u' = clip(u - tau * direction)
        g_b = np.where(step.active, g_unew, 0.0)
        g_u_in = g_u_in + g_b
        g_dir = -tau * g_b
        g_tau -= float(np.sum(g_b * step.direction))
        g_cost += g_dir
        g_nu_new = g_nu + g_dir.sum(axis=0)
        g_xi_new = g_xi + apply_W(kernel, g_dir)
        g_kernel += kernel_gradient(g_dir, step.xi)
        # xi' = P_ball(a)
        outside = step.a_norm > 1.0
        if np.any(outside):
            n = np.repeat(np.maximum(step.a_norm, 1.0), 3, axis=0)
            ahat = step.a / n
            dots = (ahat * g_xi_new).reshape((-1, 3) + g_u.shape[1:]).sum(axis=1)
            projected = (g_xi_new - ahat * np.repeat(dots, 3, axis=0)) / n
            g_a = np.where(np.repeat(outside, 3, axis=0), projected, g_xi_new)
        else:
            g_a = g_xi_new
        # a = xi + sigma W ubar
        g_xi = g_a
        g_ubar_in = sigma * apply_W_adjoint(kernel, g_a)
        g_sigma += float(np.sum(g_a * step.w_ubar))
        g_kernel += sigma * kernel_gradient(step.ubar, g_a)
        # nu' = nu + sigma (sum ubar - 1)
        g_nu = g_nu_new
        g_ubar_in = g_ubar_in + sigma * g_nu_new[None]
        g_sigma += float(np.sum(g_nu_new * step.resid))
        g_u, g_ubar = g_u_in, g_ubar_in

    return SolverGradients(g_cost, g_kernel, g_sigma, g_tau)
