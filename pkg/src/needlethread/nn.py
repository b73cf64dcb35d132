"""Small dense networks in numpy with hand-written backpropagation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda z: np.maximum(z, 0.0), lambda y: (y > 0).astype(float)),
    "linear": (lambda z: z, lambda y: np.ones_like(y)),
}


@dataclass
class MLP:
    """Fully connected network ``sizes[0] -> ... -> sizes[-1]``.

    Hidden layers use ``activation``; the output layer uses ``out_activation``.
    Derivatives are written in terms of the layer outputs, which is why only
    activations with that property are offered.
    """

    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    out_activation: str = "linear"
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, sizes, rng: np.random.Generator, activation="tanh", out_activation="linear", out_scale=1.0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("need at least an input and an output size")
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = np.sqrt(1.0 / n_in)
            if i == len(sizes) - 2:
                scale *= out_scale
            weights.append(rng.uniform(-scale, scale, size=(n_in, n_out)))
            biases.append(np.zeros(n_out))
        return cls(sizes, weights, biases, activation, out_activation)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def _act(self, layer: int):
        name = self.out_activation if layer == self.n_layers - 1 else self.activation
        return _ACTIVATIONS[name]

    def forward(self, x, keep: bool = False):
        """Output for a batch ``x`` of shape (n, sizes[0]) or a single vector.

        With ``keep`` the layer outputs are returned too, for :meth:`backward`.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        a = np.atleast_2d(x)
        if a.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {a.shape[1]}")
        acts = [a]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            f, _ = self._act(i)
            a = f(a @ w + b)
            acts.append(a)
        out = a[0] if single else a
        return (out, acts) if keep else out

    __call__ = forward

    def backward(self, acts, grad_out):
        """Gradients of ``sum(grad_out * output)`` w.r.t. weights, biases and input."""
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        if g.shape != acts[-1].shape:
            raise ValueError("grad_out shape does not match the network output")
        gw = [None] * self.n_layers
        gb = [None] * self.n_layers
        for i in range(self.n_layers - 1, -1, -1):
            _, df = self._act(i)
            g = g * df(acts[i + 1])
            gw[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return gw, gb, g

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    @staticmethod
    def interleave(gw, gb) -> list[np.ndarray]:
        return [p for pair in zip(gw, gb) for p in pair]

    def copy(self) -> "MLP":
        return MLP(
            list(self.sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.out_activation,
            dict(self.meta),
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=float)
        pos = 0
        for p in self.params():
            p[...] = vec[pos : pos + p.size].reshape(p.shape)
            pos += p.size
        if pos != vec.size:
            raise ValueError("flat vector has the wrong length")

    def soft_update(self, source: "MLP", tau: float) -> None:
        """Move parameters towards ``source`` by the mixing rate ``tau``."""
        for p, q in zip(self.params(), source.params()):
            p *= 1.0 - tau
            p += tau * q

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "sizes": self.sizes,
            "activation": self.activation,
            "out_activation": self.out_activation,
            "meta": self.meta,
            "weights": self.flat().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MLP":
        if data.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported network format version {data.get('version')}")
        net = cls.create(data["sizes"], np.random.default_rng(0), data["activation"], data["out_activation"])
        net.set_flat(data["weights"])
        net.meta = dict(data.get("meta", {}))
        return net


def save_networks(path, **nets) -> None:
    payload = {"version": FORMAT_VERSION, "networks": {k: v.to_dict() for k, v in nets.items()}}
    Path(path).write_text(json.dumps(payload))


def load_networks(path) -> dict[str, MLP]:
    data = json.loads(Path(path).read_text())
    if data.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data.get('version')}")
    return {k: MLP.from_dict(v) for k, v in data["networks"].items()}


class Adam:
    def __init__(self, params, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def gradient_check(net: MLP, x, grad_out, rng: np.random.Generator, probes: int = 10, h: float = 1e-6) -> float:
    """Worst relative error between backprop and central differences.

    The scalar checked is ``sum(grad_out * net(x))``. Each probe perturbs one
    randomly chosen weight, bias or input entry.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float)).copy()
    grad_out = np.atleast_2d(grad_out)
    _, acts = net.forward(x, keep=True)
    gw, gb, gx = net.backward(acts, grad_out)
    analytic = MLP.interleave(gw, gb) + [gx]
    targets = net.params() + [x]

    def loss():
        return float(np.sum(grad_out * net.forward(x)))

    worst = 0.0
    for _ in range(probes):
        k = int(rng.integers(len(targets)))
        arr = targets[k]
        idx = tuple(int(rng.integers(n)) for n in arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        up = loss()
        arr[idx] = old - h
        down = loss()
        arr[idx] = old
        numeric = (up - down) / (2 * h)
        exact = analytic[k][idx]
        err = abs(numeric - exact) / max(abs(numeric) + abs(exact), 1e-7)
        worst = max(worst, err)
    return worst


@dataclass
class Standardizer:
    """Per-dimension z-scoring fitted on training data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=float)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def __call__(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data) -> "Standardizer":
        return cls(np.asarray(data["mean"], dtype=float), np.asarray(data["std"], dtype=float))
