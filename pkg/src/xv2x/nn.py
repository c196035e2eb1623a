"""Small fully-connected Q-network in numpy with RMSProp training.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch of row
vectors propagates as ``x @ W + b``.
"""

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import TrainingDivergence

CHECKPOINT_MAGIC = b"XV2XNET\x00"
CHECKPOINT_VERSION = 1


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0).astype(float)


def _tanh_grad(z):
    return 1.0 - np.tanh(z) ** 2


ACTIVATIONS = {
    "linear": (lambda z: z, np.ones_like),
    "tanh": (np.tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
}


@dataclass(frozen=True)
class TrainHyper:
    lr0: float = 0.01
    lr_decay: float = 1e-4
    discount: float = 0.99
    batch_size: int = 100
    eps0: float = 0.1
    eps_decay: float = 1e-4

    def __post_init__(self):
        if not (self.lr0 > 0 and 0 <= self.lr_decay < 1 and 0 <= self.discount < 1
                and self.batch_size >= 1 and 0 <= self.eps0 <= 1 and 0 <= self.eps_decay < 1):
            raise ValueError(f"hyperparameters out of range: {self}")


def table3_hidden_sizes(input_dim):
    return (5 * input_dim + 8, 3 * input_dim, 2 * input_dim)


class MLP:
    """Feed-forward network with per-layer activations and RMSProp state."""

    def __init__(self, layer_dims, activations, weights=None, biases=None, rho=0.9, eps=1e-8):
        self.layer_dims = tuple(int(d) for d in layer_dims)
        self.activations = tuple(activations)
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise ValueError(f"bad layer dims {layer_dims}")
        if len(self.activations) != len(self.layer_dims) - 1:
            raise ValueError("need one activation per non-input layer")
        unknown = set(self.activations) - set(ACTIVATIONS)
        if unknown:
            raise ValueError(f"unknown activations {sorted(unknown)}")
        shapes = list(zip(self.layer_dims[:-1], self.layer_dims[1:]))
        self.weights = [np.zeros(s) for s in shapes] if weights is None else [np.array(w, dtype=float) for w in weights]
        self.biases = [np.zeros(s[1]) for s in shapes] if biases is None else [np.array(b, dtype=float) for b in biases]
        for w, b, s in zip(self.weights, self.biases, shapes):
            if w.shape != s or b.shape != (s[1],):
                raise ValueError(f"parameter shapes do not match layer dims {self.layer_dims}")
        self.rho = rho
        self.eps = eps
        self._ms_w = [np.zeros_like(w) for w in self.weights]
        self._ms_b = [np.zeros_like(b) for b in self.biases]

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    @property
    def n_layers(self):
        return len(self.weights)

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} input features, got {x.shape[-1]}")
        return x

    def forward(self, x):
        a = self._check_input(x)
        for w, b, act in zip(self.weights, self.biases, self.activations):
            a = ACTIVATIONS[act][0](a @ w + b)
        return a

    __call__ = forward

    def forward_with_trace(self, x):
        """Outputs plus a list of (pre_activation, post_activation) per layer."""
        a = self._check_input(x)
        trace = []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ w + b
            a = ACTIVATIONS[act][0](z)
            trace.append((z, a))
        return a, trace

    def gradients(self, x, actions, targets):
        """Squared TD loss and its gradients, flowing only through the taken actions.

        ``actions``/``targets`` are (D,) for a single head or (D, S) for S
        action segments whose losses add up.
        """
        x = np.atleast_2d(self._check_input(x))
        actions = np.asarray(actions, dtype=int)
        targets = np.asarray(targets, dtype=float)
        if actions.ndim == 1:
            actions, targets = actions[:, None], targets[:, None]
        d = x.shape[0]
        out, trace = self.forward_with_trace(x)
        rows = np.arange(d)[:, None]
        err = targets - out[rows, actions]
        loss = float(np.mean(np.sum(err ** 2, axis=1)))
        grad_out = np.zeros_like(out)
        np.add.at(grad_out, (np.broadcast_to(rows, actions.shape), actions), -2.0 * err / d)
        gw, gb = [None] * self.n_layers, [None] * self.n_layers
        delta = grad_out * ACTIVATIONS[self.activations[-1]][1](trace[-1][0])
        for layer in range(self.n_layers - 1, -1, -1):
            a_prev = x if layer == 0 else trace[layer - 1][1]
            gw[layer] = a_prev.T @ delta
            gb[layer] = delta.sum(axis=0)
            if layer:
                delta = (delta @ self.weights[layer].T) * ACTIVATIONS[self.activations[layer - 1]][1](trace[layer - 1][0])
        return loss, gw, gb

    def backward_update(self, x, actions, targets, lr):
        """One RMSProp step on the mean squared TD error; returns the pre-step loss."""
        loss, gw, gb = self.gradients(x, actions, targets)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"non-finite TD loss {loss}")
        rho, eps = self.rho, self.eps
        for params, grads, ms in ((self.weights, gw, self._ms_w), (self.biases, gb, self._ms_b)):
            for p, g, m in zip(params, grads, ms):
                m *= rho
                m += (1 - rho) * g * g
                p -= lr * g / (np.sqrt(m) + eps)
        return loss

    def param_count(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def param_hash(self):
        h = hashlib.sha256()
        for w, b in zip(self.weights, self.biases):
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return h.hexdigest()

    def clone(self):
        net = MLP(self.layer_dims, self.activations, self.weights, self.biases, self.rho, self.eps)
        net._ms_w = [m.copy() for m in self._ms_w]
        net._ms_b = [m.copy() for m in self._ms_b]
        return net

    def to_bytes(self, master_seed=None, extra=None):
        header = {
            "format_version": CHECKPOINT_VERSION,
            "layer_dims": list(self.layer_dims),
            "activations": list(self.activations),
            "optimizer": {"name": "rmsprop", "rho": self.rho, "eps": self.eps},
            "master_seed": master_seed,
            "dtype": "<f8",
            "order": "C",
        }
        if extra:
            header["extra"] = extra
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
        for w, b in zip(self.weights, self.biases):
            parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data):
        if data[:8] != CHECKPOINT_MAGIC:
            raise ValueError("not an MLP checkpoint")
        version, hlen = struct.unpack("<II", data[8:16])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
        dims = header["layer_dims"]
        offset = 16 + hlen
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            n = fan_in * fan_out
            weights.append(np.frombuffer(data, "<f8", n, offset).reshape(fan_in, fan_out).copy())
            offset += 8 * n
            biases.append(np.frombuffer(data, "<f8", fan_out, offset).copy())
            offset += 8 * fan_out
        if offset != len(data):
            raise ValueError("checkpoint size does not match header")
        opt = header["optimizer"]
        net = cls(dims, header["activations"], weights, biases, rho=opt["rho"], eps=opt["eps"])
        return net, header


def build_mlp(input_dim, output_dim, seed, output_activation="relu", hidden=None):
    """Q-network sized by the input-width rule: hidden widths (5L+8, 3L, 2L)."""
    if input_dim < 1 or output_dim < 1:
        raise ValueError("dims must be >= 1")
    hidden = table3_hidden_sizes(input_dim) if hidden is None else tuple(hidden)
    dims = (input_dim, *hidden, output_dim)
    # Tanh / ReLU alternate across hidden layers
    acts = tuple(("tanh", "relu")[i % 2] for i in range(len(hidden)))
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, fan_out))
    return MLP(dims, (*acts, output_activation), weights, biases)


def copy_weights(src, dst):
    if src.layer_dims != dst.layer_dims:
        raise ValueError(f"shape mismatch: {src.layer_dims} vs {dst.layer_dims}")
    for i in range(src.n_layers):
        dst.weights[i] = src.weights[i].copy()
        dst.biases[i] = src.biases[i].copy()


def param_count(net):
    return net.param_count()


def param_count_for_input(input_dim, output_dim):
    dims = (input_dim, *table3_hidden_sizes(input_dim), output_dim)
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
