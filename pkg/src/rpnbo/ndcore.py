"""Feed-forward networks with hand-written reverse mode, plus Adam.

Every parameter tensor may carry leading "member" axes, so a whole
ensemble of identically shaped networks is evaluated with one batched
matmul per layer.  Inputs either share the member axes or broadcast
against them.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def _tanh_grad(h):
    return 1.0 - h * h


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(h):
    return (h > 0.0).astype(h.dtype)


# derivatives are written in terms of the activation *output*
ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
}


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight matrix")
        for w, nxt in zip(self.weights[:-1], self.weights[1:]):
            if w.shape[-1] != nxt.shape[-2]:
                raise DimensionError(f"layer widths do not chain: {w.shape} -> {nxt.shape}")
        for w, b in zip(self.weights, self.biases):
            if w.shape[-1] != b.shape[-1]:
                raise DimensionError(f"bias {b.shape} does not match weight {w.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[-2]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[-1]

    def tensors(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "MlpParams":
        n = len(self.weights)
        return MlpParams(list(tensors[:n]), list(tensors[n:]), self.activation)

    def take(self, index) -> "MlpParams":
        """Select along the leading member axis."""
        return MlpParams([w[index] for w in self.weights], [b[index] for b in self.biases], self.activation)


@dataclass
class DeepONetParams:
    branch: MlpParams
    trunk: MlpParams
    bias: np.ndarray  # shape (*members,), one scalar per network

    def __post_init__(self):
        if self.branch.out_dim != self.trunk.out_dim:
            raise DimensionError(
                f"branch latent width {self.branch.out_dim} != trunk latent width {self.trunk.out_dim}"
            )

    @property
    def in_dim(self) -> int:
        return self.branch.in_dim

    def tensors(self) -> list[np.ndarray]:
        return [*self.branch.tensors(), *self.trunk.tensors(), self.bias]

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "DeepONetParams":
        nb = len(self.branch.tensors())
        nt = len(self.trunk.tensors())
        return DeepONetParams(
            self.branch.with_tensors(tensors[:nb]),
            self.trunk.with_tensors(tensors[nb:nb + nt]),
            tensors[nb + nt],
        )

    def take(self, index) -> "DeepONetParams":
        return DeepONetParams(self.branch.take(index), self.trunk.take(index), self.bias[index])


def glorot_mlp(rng: np.random.Generator, widths: Sequence[int], activation: str = "tanh",
               batch: tuple[int, ...] = ()) -> MlpParams:
    """Glorot-uniform weights and zero biases for the layer widths given."""
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(*batch, fan_in, fan_out)))
        biases.append(np.zeros((*batch, fan_out)))
    return MlpParams(weights, biases, activation)


def _check_input(params: MlpParams, x: np.ndarray):
    if x.shape[-1] != params.in_dim:
        raise DimensionError(f"input width {x.shape[-1]} != network input width {params.in_dim}")


def mlp_forward_cached(params: MlpParams, x: np.ndarray):
    """Forward pass returning the output and the input of every layer."""
    _check_input(params, x)
    act, _ = ACTIVATIONS[params.activation]
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b[..., None, :]
        h = z if k == last else act(z)
        if k != last:
            acts.append(h)
    return h, acts


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network; the last layer is linear.

    ``x`` may be a single input vector or a stack ``(..., n, d)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        out, _ = mlp_forward_cached(params, x[None, :])
        return out[..., 0, :]
    out, _ = mlp_forward_cached(params, x)
    return out


def mlp_backprop(params: MlpParams, acts: list[np.ndarray], g: np.ndarray,
                 input_grad: bool = False):
    """Pull the output cotangent ``g`` back through the layers.

    Returns (parameter gradients as MlpParams, input cotangent or None).
    Gradients are summed over the sample axis; any member axes are kept.
    """
    _, dact = ACTIVATIONS[params.activation]
    n = len(params.weights)
    gw: list = [None] * n
    gb: list = [None] * n
    for k in range(n - 1, -1, -1):
        a = acts[k]
        gw[k] = np.swapaxes(a, -1, -2) @ g
        gb[k] = g.sum(axis=-2)
        if k > 0 or input_grad:
            g = g @ np.swapaxes(params.weights[k], -1, -2)
            if k > 0:
                g = g * dact(a)
    # inputs shared across members give weight gradients that already broadcast
    gw = [np.broadcast_to(gk, w.shape).copy() if gk.shape != w.shape else gk
          for gk, w in zip(gw, params.weights)]
    gb = [np.broadcast_to(gk, b.shape).copy() if gk.shape != b.shape else gk
          for gk, b in zip(gb, params.biases)]
    return MlpParams(gw, gb, params.activation), (g if input_grad else None)


def mse(pred: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean squared error over the last two axes (samples and outputs)."""
    return np.mean((pred - y) ** 2, axis=(-2, -1))


def mlp_backward(params: MlpParams, batch_x, batch_y):
    """Gradient of the mean squared error with respect to every parameter.

    Returns ``(loss, grads)``; with member axes, ``loss`` has one entry per
    member and each member's gradient is that of its own loss.
    """
    x = np.asarray(batch_x, dtype=np.float64)
    y = np.asarray(batch_y, dtype=np.float64)
    if x.shape[-2] == 0:
        raise DimensionError("empty batch")
    out, acts = mlp_forward_cached(params, x)
    if out.shape[-2:] != y.shape[-2:]:
        raise DimensionError(f"target shape {y.shape} does not match output {out.shape}")
    resid = out - y
    loss = np.mean(resid ** 2, axis=(-2, -1))
    if not np.all(np.isfinite(loss)):
        raise TrainingError(f"non-finite loss {loss}")
    g = resid * (2.0 / (resid.shape[-2] * resid.shape[-1]))
    grads, _ = mlp_backprop(params, acts, g)
    return loss, grads


def glorot_deeponet(rng: np.random.Generator, in_dim: int, coord_dim: int, hidden: Sequence[int],
                    latent: int, activation: str = "tanh", batch: tuple[int, ...] = ()) -> DeepONetParams:
    branch = glorot_mlp(rng, [in_dim, *hidden, latent], activation, batch)
    trunk = glorot_mlp(rng, [coord_dim, *hidden, latent], activation, batch)
    return DeepONetParams(branch, trunk, np.zeros(batch))


def deeponet_forward_cached(params: DeepONetParams, x: np.ndarray, coords: np.ndarray):
    bout, bacts = mlp_forward_cached(params.branch, x)
    tout, tacts = mlp_forward_cached(params.trunk, coords)
    out = bout @ np.swapaxes(tout, -1, -2) + params.bias[..., None, None]
    return out, (bout, bacts, tout, tacts)


def deeponet_forward(params: DeepONetParams, x, coords) -> np.ndarray:
    """output_j = <branch(x), trunk(coords_j)> + bias."""
    x = np.asarray(x, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords[:, None]
    if x.ndim == 1:
        out, _ = deeponet_forward_cached(params, x[None, :], coords)
        return out[..., 0, :]
    out, _ = deeponet_forward_cached(params, x, coords)
    return out


def deeponet_backprop(params: DeepONetParams, cache, g: np.ndarray, input_grad: bool = False):
    bout, bacts, tout, tacts = cache
    g_b = g @ tout
    g_t = np.swapaxes(g, -1, -2) @ bout
    gbranch, gx = mlp_backprop(params.branch, bacts, g_b, input_grad=input_grad)
    gtrunk, _ = mlp_backprop(params.trunk, tacts, g_t)
    gbias = g.sum(axis=(-2, -1))
    gbias = np.broadcast_to(gbias, params.bias.shape).copy()
    return DeepONetParams(gbranch, gtrunk, gbias), gx


def deeponet_backward(params: DeepONetParams, batch_x, coords, batch_y):
    x = np.asarray(batch_x, dtype=np.float64)
    y = np.asarray(batch_y, dtype=np.float64)
    out, cache = deeponet_forward_cached(params, x, coords)
    resid = out - y
    loss = np.mean(resid ** 2, axis=(-2, -1))
    if not np.all(np.isfinite(loss)):
        raise TrainingError(f"non-finite loss {loss}")
    g = resid * (2.0 / (resid.shape[-2] * resid.shape[-1]))
    grads, _ = deeponet_backprop(params, cache, g)
    return loss, grads


# ---------------------------------------------------------------- Adam

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    base_lr: float = 1e-3
    decay: float = 0.999
    decay_every: int = field(default=1000)

    @property
    def effective_lr(self) -> float:
        return self.base_lr * self.decay ** (self.step_count // self.decay_every)


def adam_init(params, base_lr: float = 1e-3, decay: float = 0.999) -> AdamState:
    ts = params.tensors()
    return AdamState([np.zeros_like(t) for t in ts], [np.zeros_like(t) for t in ts], 0, base_lr, decay)


def adam_step(params, grads, state: AdamState, check_finite: bool = True):
    """One Adam update at the staircase-decayed learning rate.

    ``params`` and ``grads`` are MlpParams/DeepONetParams of equal shapes.
    Returns the new (params, state); inputs are not modified.
    """
    ps, gs = params.tensors(), grads.tensors()
    if len(ps) != len(gs) or any(p.shape != g.shape for p, g in zip(ps, gs)):
        raise DimensionError("gradient shapes do not match parameters")
    if check_finite and not all(np.all(np.isfinite(g)) for g in gs):
        raise TrainingError("non-finite gradient")
    lr = state.effective_lr
    t = state.step_count + 1
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(ps, gs, state.first_moment, state.second_moment):
        m = BETA1 * m + (1.0 - BETA1) * g
        v = BETA2 * v + (1.0 - BETA2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS))
        new_m.append(m)
        new_v.append(v)
    return params.with_tensors(new_p), replace(state, first_moment=new_m, second_moment=new_v, step_count=t)
