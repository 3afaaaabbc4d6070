"""Dense GELU networks with hand-written reverse-mode gradients and AdamW.

Everything runs in float64. Parameters are plain numpy arrays; weights are
stored ``(out, in)`` so a layer computes ``x @ W.T + b``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from ._validation import check_points
from .exceptions import NumericalError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass
class MlpParams:
    """Affine layers with GELU between them and a linear output layer."""

    weights: list
    biases: list
    activation: str = "gelu"

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {k}: weight {W.shape} and bias {b.shape} do not match")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(
                    f"layer {k} expects {W.shape[1]} inputs but layer {k - 1} "
                    f"produces {self.weights[k - 1].shape[0]}"
                )

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    def arrays(self):
        """Flat ``[W0, b0, W1, b1, ...]`` view used by the optimizer."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    @classmethod
    def from_arrays(cls, arrays, activation="gelu"):
        return cls(list(arrays[0::2]), list(arrays[1::2]), activation)

    def copy(self):
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.activation)

    def n_parameters(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))


@dataclass
class ForwardTape:
    inputs: list = field(default_factory=list)  # input to each layer
    pre_activations: list = field(default_factory=list)

    @property
    def depth(self):
        return len(self.pre_activations)


def init_params(layer_sizes, seed):
    """Glorot-uniform weights and zero biases for ``layer_sizes[0] -> ... -> [-1]``."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError("layer_sizes needs an input and at least one positive output size")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def mlp_forward(params, inputs):
    """Return ``(output, tape)``; GELU on hidden layers, identity on the last."""
    x = check_points(inputs, "inputs")
    if x.shape[1] != params.in_dim:
        raise ValueError(f"network expects {params.in_dim} input columns, got {x.shape[1]}")
    tape = ForwardTape()
    last = params.n_layers - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        tape.inputs.append(x)
        z = x @ W.T + b
        tape.pre_activations.append(z)
        x = z if k == last else gelu(z)
    return x, tape


def mlp_backward(params, tape, grad_output):
    """Reverse-mode pass for the scalar ``sum(grad_output * output)``.

    Returns ``(grad_params, grad_input)`` where ``grad_params`` is an
    :class:`MlpParams` holding the gradient of every weight and bias.
    """
    if tape.depth != params.n_layers:
        raise ValueError(f"tape has {tape.depth} layers but the network has {params.n_layers}")
    delta = np.asarray(grad_output, dtype=np.float64)
    if delta.shape != tape.pre_activations[-1].shape:
        raise ValueError(
            f"grad_output shape {delta.shape} does not match output {tape.pre_activations[-1].shape}"
        )
    grad_w = [None] * params.n_layers
    grad_b = [None] * params.n_layers
    for k in range(params.n_layers - 1, -1, -1):
        if k != params.n_layers - 1:
            delta = delta * gelu_grad(tape.pre_activations[k])
        grad_w[k] = delta.T @ tape.inputs[k]
        grad_b[k] = delta.sum(axis=0)
        delta = delta @ params.weights[k]
    return MlpParams(grad_w, grad_b, params.activation), delta


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: list = None
    v: list = None

    def copy(self):
        return AdamWState(
            self.lr,
            self.beta1,
            self.beta2,
            self.eps_opt,
            self.weight_decay,
            self.step,
            None if self.m is None else [a.copy() for a in self.m],
            None if self.v is None else [a.copy() for a in self.v],
        )


def adamw_step(params, grads, state):
    """One AdamW update on a list of arrays; returns new ``(params, state)``.

    Weight decay is decoupled: ``p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``.
    Inputs are not modified.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads must have the same length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient passed to adamw_step")

    new = state.copy()
    if new.m is None:
        new.m = [np.zeros_like(p) for p in params]
        new.v = [np.zeros_like(p) for p in params]
    new.step += 1
    c1 = 1.0 - new.beta1**new.step
    c2 = 1.0 - new.beta2**new.step
    decay = 1.0 - new.lr * new.weight_decay
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        new.m[i] = new.beta1 * new.m[i] + (1.0 - new.beta1) * g
        new.v[i] = new.beta2 * new.v[i] + (1.0 - new.beta2) * g * g
        update = (new.m[i] / c1) / (np.sqrt(new.v[i] / c2) + new.eps_opt)
        out.append(p * decay - new.lr * update)
    return out, new
