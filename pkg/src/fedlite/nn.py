"""Dense feedforward networks with explicit forward/backward passes.

Everything is float64 and batches are column-major: an activation matrix has
shape (dim, batch), one column per example.  Matrix products are written as
explicit accumulations over the contraction axis instead of ``@``: BLAS (and
einsum) change their reduction order with the operand shapes, while a fixed
sequence of exactly-rounded adds and multiplies makes a batch forward equal
the per-column forwards bit for bit.  Networks here are small enough that the
extra passes do not matter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh", "softmax_ce")


class CacheMismatchError(RuntimeError):
    """Raised when backward() gets a cache that does not belong to the net."""


def _matmul(a, b):
    # accumulate over the contraction axis in a fixed order, one rank-1
    # update per step; every output element sees the same op sequence no
    # matter how many columns ride along
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[1]):
        out += a[:, i:i + 1] * b[i:i + 1, :]
    return out


def _outer_accum(g, a):
    # sum_j g[:, j] a[:, j]^T with a fixed per-example order
    out = np.zeros((g.shape[0], a.shape[0]))
    for j in range(g.shape[1]):
        out += g[:, j:j + 1] * a[:, j]
    return out


@dataclass
class Layer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray    # (out_dim,)
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("layer wants a 2-d weight and a 1-d bias")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match "
                f"{self.weight.shape[0]} output rows"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class DenseNetwork:
    """A stack of affine layers with elementwise activations.

    The ``softmax_ce`` tag marks a layer whose raw output is logits; the
    softmax and cross-entropy are applied by :func:`loss_and_grad`, so a plain
    :func:`forward` through such a layer yields the logits themselves.
    """

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer output {prev.out_dim} feeds layer input {nxt.in_dim}"
                )
        self.layers = layers

    @classmethod
    def create(cls, sizes: Sequence[int], activations: Sequence[str],
               seed: int = 0) -> "DenseNetwork":
        """Build a network with uniform(+-sqrt(6/(in+out))) weights, zero biases.

        ``sizes`` lists the layer widths including input and output, so
        ``len(activations) == len(sizes) - 1``.
        """
        if len(sizes) < 2:
            raise ValueError("need an input and an output size")
        if len(activations) != len(sizes) - 1:
            raise ValueError("one activation per layer required")
        rng = np.random.default_rng(seed)
        layers = []
        for n_in, n_out, act in zip(sizes, sizes[1:], activations):
            limit = np.sqrt(6.0 / (n_in + n_out))
            weight = rng.uniform(-limit, limit, size=(n_out, n_in))
            layers.append(Layer(weight, np.zeros(n_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def params_vector(self) -> np.ndarray:
        """Flatten all parameters, layer by layer, weights before bias."""
        parts = []
        for l in self.layers:
            parts.append(l.weight.ravel())
            parts.append(l.bias)
        return np.concatenate(parts)

    def set_params_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.parameter_count,):
            raise ValueError(f"expected {self.parameter_count} parameters")
        pos = 0
        for l in self.layers:
            n = l.weight.size
            l.weight = vec[pos:pos + n].reshape(l.weight.shape).copy()
            pos += n
            n = l.bias.size
            l.bias = vec[pos:pos + n].copy()
            pos += n

    def copy(self) -> "DenseNetwork":
        return DenseNetwork(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def sgd_step(self, grad_vector: np.ndarray, lr: float) -> None:
        """In-place params -= lr * grad, with grad in params_vector() layout."""
        grad_vector = np.asarray(grad_vector, dtype=np.float64)
        if grad_vector.shape != (self.parameter_count,):
            raise ValueError(f"expected {self.parameter_count} gradient entries")
        pos = 0
        for l in self.layers:
            n = l.weight.size
            l.weight = l.weight - lr * grad_vector[pos:pos + n].reshape(l.weight.shape)
            pos += n
            n = l.bias.size
            l.bias = l.bias - lr * grad_vector[pos:pos + n]
            pos += n


@dataclass
class ParameterGradient:
    """Per-layer gradients, shape-congruent with the source network."""

    weight_grads: list
    bias_grads: list

    def to_vector(self) -> np.ndarray:
        parts = []
        for dw, db in zip(self.weight_grads, self.bias_grads):
            parts.append(dw.ravel())
            parts.append(db)
        return np.concatenate(parts)

    def check_congruent(self, net: DenseNetwork) -> None:
        if len(self.weight_grads) != len(net.layers):
            raise ValueError("gradient layer count does not match network")
        for (dw, db, l) in zip(self.weight_grads, self.bias_grads, net.layers):
            if dw.shape != l.weight.shape or db.shape != l.bias.shape:
                raise ValueError("gradient shapes do not match network")


@dataclass
class ForwardCache:
    net: DenseNetwork
    inputs: list       # layer inputs a_{k-1}, one per layer
    preacts: list      # pre-activation z_k, one per layer
    batch: int


def _apply_activation(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    # identity and softmax_ce both pass logits through
    return z


def _activation_deriv(tag: str, z: np.ndarray):
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    if tag == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return None  # factor of one


def forward(net: DenseNetwork, inputs: np.ndarray):
    """Run the network on a (in_dim, batch) matrix.

    Returns ``(outputs, cache)`` where outputs is (out_dim, batch) and the
    cache must be handed back to :func:`backward` unchanged.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] != net.input_dim:
        raise ValueError(
            f"inputs must be ({net.input_dim}, batch), got {inputs.shape}"
        )
    layer_inputs = []
    preacts = []
    a = inputs
    for l in net.layers:
        layer_inputs.append(a)
        z = _matmul(l.weight, a) + l.bias[:, None]
        preacts.append(z)
        a = _apply_activation(l.activation, z)
    return a, ForwardCache(net, layer_inputs, preacts, inputs.shape[1])


def backward(net: DenseNetwork, cache: ForwardCache, upstream: np.ndarray):
    """Vector-Jacobian product through the network.

    ``upstream`` is (out_dim, batch); the result is the gradient of
    sum_j <upstream_j, output_j> with respect to parameters and inputs.
    Averaging over the batch is the caller's business.
    """
    if cache.net is not net:
        raise CacheMismatchError("cache was produced by a different network")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (net.output_dim, cache.batch):
        raise ValueError(
            f"upstream must be ({net.output_dim}, {cache.batch}), got {upstream.shape}"
        )
    weight_grads = [None] * len(net.layers)
    bias_grads = [None] * len(net.layers)
    g = upstream
    for k in range(len(net.layers) - 1, -1, -1):
        l = net.layers[k]
        deriv = _activation_deriv(l.activation, cache.preacts[k])
        if deriv is not None:
            g = g * deriv
        weight_grads[k] = _outer_accum(g, cache.inputs[k])
        bias_grads[k] = g.sum(axis=1)
        g = _matmul(l.weight.T, g)
    return ParameterGradient(weight_grads, bias_grads), g


def softmax_columns(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def loss_and_grad(net: DenseNetwork, inputs: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch plus its gradients.

    Requires the final layer to carry the ``softmax_ce`` tag.  Returns
    ``(loss, param_grad, input_grad)`` where both gradients are of the
    batch-mean loss.
    """
    if net.layers[-1].activation != "softmax_ce":
        raise ValueError("loss_and_grad needs a softmax_ce output layer")
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-d integer array")
    if labels.shape[0] != np.asarray(inputs).shape[1]:
        raise ValueError("one label per input column required")
    if labels.size and (labels.min() < 0 or labels.max() >= net.output_dim):
        raise ValueError(f"labels must lie in [0, {net.output_dim})")
    labels = labels.astype(np.int64)

    logits, cache = forward(net, inputs)
    probs = softmax_columns(logits)
    batch = labels.shape[0]
    cols = np.arange(batch)
    loss = float(-np.log(probs[labels, cols]).mean())
    dlogits = probs.copy()
    dlogits[labels, cols] -= 1.0
    dlogits /= batch
    param_grad, input_grad = backward(net, cache, dlogits)
    return loss, param_grad, input_grad


@dataclass
class SplitModel:
    """A network cut in two: the client half ends where the server half begins."""

    client_net: DenseNetwork
    server_net: DenseNetwork

    def __post_init__(self):
        if self.client_net.output_dim != self.server_net.input_dim:
            raise ValueError(
                f"cut width mismatch: client emits {self.client_net.output_dim}, "
                f"server expects {self.server_net.input_dim}"
            )

    @property
    def cut_dim(self) -> int:
        return self.client_net.output_dim

    @property
    def parameter_count(self) -> int:
        return self.client_net.parameter_count + self.server_net.parameter_count

    def copy(self) -> "SplitModel":
        return SplitModel(self.client_net.copy(), self.server_net.copy())
