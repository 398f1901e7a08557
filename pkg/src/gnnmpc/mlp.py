"""Small dense MLPs with ReLU hidden layers and a linear output layer.

Everything is plain numpy: batched forward passes, reverse-mode parameter
gradients, and exact input Jacobians via the layer chain rule. The ReLU
derivative at a pre-activation of exactly zero is taken as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MlpParams:
    """Weights/biases for one MLP. ``weights[l]`` has shape
    (layer_dims[l+1], layer_dims[l]); hidden activations are ReLU, the
    output layer is affine."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        dims = [int(d) for d in self.layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError("layer_dims needs >= 2 positive entries")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("need one weight/bias pair per layer")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            W = np.asarray(W, dtype=float)
            b = np.asarray(b, dtype=float)
            if W.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise ValueError(f"layer {l} shape mismatch with layer_dims")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")
            self.weights[l] = W
            self.biases[l] = b
        self.layer_dims = dims

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_dims),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
        )

    def param_sq_norm(self) -> float:
        return float(
            sum(np.sum(W * W) for W in self.weights) + sum(np.sum(b * b) for b in self.biases)
        )


def mlp_init(layer_dims, rng: np.random.Generator, out_scale: float = 1.0) -> MlpParams:
    """He-style init; `out_scale` multiplies the output layer weights (used
    to seed the network at the scale of its regression targets)."""
    weights, biases = [], []
    for l in range(len(layer_dims) - 1):
        fan_in = layer_dims[l]
        W = rng.standard_normal((layer_dims[l + 1], fan_in)) * np.sqrt(2.0 / fan_in)
        if l == len(layer_dims) - 2:
            W *= out_scale
        weights.append(W)
        biases.append(np.zeros(layer_dims[l + 1]))
    return MlpParams(list(layer_dims), weights, biases)


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Batched forward pass; x has shape (..., in_dim)."""
    h = x
    last = params.n_layers - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W.T + b
        if l != last:
            h = np.maximum(h, 0.0)
    return h


def mlp_forward_cached(params: MlpParams, x: np.ndarray):
    """Forward pass keeping pre-activations for backprop/Jacobians.

    Returns (output, cache) where cache = (inputs per layer, pre-activations).
    """
    acts = [x]
    pres = []
    h = x
    last = params.n_layers - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W.T + b
        pres.append(z)
        h = np.maximum(z, 0.0) if l != last else z
        if l != last:
            acts.append(h)
    return h, (acts, pres)


def mlp_backward(params: MlpParams, cache, grad_out: np.ndarray):
    """Reverse-mode pass. grad_out is dLoss/d(output), shape (..., out_dim).

    Returns (grad_weights, grad_biases, grad_input); gradients are summed
    over all batch dimensions.
    """
    acts, pres = cache
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    g = grad_out
    for l in range(params.n_layers - 1, -1, -1):
        if l != params.n_layers - 1:
            g = g * (pres[l] > 0.0)
        a = acts[l]
        gf = g.reshape(-1, g.shape[-1])
        af = a.reshape(-1, a.shape[-1])
        gw[l] = gf.T @ af
        gb[l] = gf.sum(axis=0)
        g = g @ params.weights[l]
    return gw, gb, g


def mlp_jacobian(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Exact Jacobian d(output)/d(input) at each batch point.

    x: (..., in_dim) -> J: (..., out_dim, in_dim). ReLU subgradient at a
    pre-activation of exactly 0 is 0 (strict `> 0` mask). Accumulated from
    the output side, which is cheap when out_dim is small.
    """
    _, (_, pres) = mlp_forward_cached(params, x)
    batch = x.shape[:-1]
    J = np.broadcast_to(params.weights[-1], batch + params.weights[-1].shape)
    for l in range(params.n_layers - 2, -1, -1):
        mask = pres[l] > 0.0
        J = (J * mask[..., None, :]) @ params.weights[l]
    return np.ascontiguousarray(J)
