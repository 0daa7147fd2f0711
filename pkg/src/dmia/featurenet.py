"""Softplus MLP feature extractor with reverse-mode gradients and Adam."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from dmia.numeric import RngStream

ACTIVATION = "softplus"


def softplus(z: np.ndarray) -> np.ndarray:
    # stable log(1 + e^z)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class FeatureNet:
    """Fully connected net: softplus on hidden layers, identity on the output.

    ``weights[i]`` has shape ``(fan_in, fan_out)`` and acts as ``X @ W + b``.
    ``depth`` counts hidden layers, so a depth-0 net is one linear map.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i} does not chain onto layer {i - 1}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    @classmethod
    def init(cls, in_dim: int, hidden: int, out_dim: int, depth: int, rng: RngStream) -> "FeatureNet":
        """Glorot-uniform weights, zero biases."""
        dims = [in_dim] + [hidden] * depth + [out_dim]
        gen = rng.generator()
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(gen.uniform(-lim, lim, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def identity(cls, dim: int) -> "FeatureNet":
        return cls([np.eye(dim)], [np.zeros(dim)])

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def params(self) -> list[np.ndarray]:
        """Parameters in the canonical order ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params: list[np.ndarray]) -> "FeatureNet":
        return FeatureNet(list(params[0::2]), list(params[1::2]))

    def copy(self) -> "FeatureNet":
        return self.with_params([p.copy() for p in self.params])

    def forward(self, X, cache: bool = False):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ValueError(f"expected (n, {self.in_dim}) input, got {X.shape}")
        acts = [X]
        pre = []
        h = X
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = z if i == last else softplus(z)
            acts.append(h)
        if cache:
            return h, (acts, pre)
        return h

    def backward(self, X, upstream, cache=None):
        """Gradients of ``L`` given ``dL/d(output) = upstream``.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
        :attr:`params`.
        """
        if cache is None:
            out, cache = self.forward(X, cache=True)
        acts, pre = cache
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != acts[-1].shape:
            raise ValueError(f"upstream gradient {upstream.shape} != output {acts[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        g = upstream
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                g = g * sigmoid(pre[i])
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g

    def to_dict(self) -> dict:
        return {
            "activation": ACTIVATION,
            "dims": [self.in_dim] + [w.shape[1] for w in self.weights],
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureNet":
        if d.get("activation") != ACTIVATION:
            raise ValueError(f"unsupported activation {d.get('activation')!r}")
        dims = d["dims"]
        weights = [np.asarray(w, dtype=np.float64).reshape(a, b)
                   for w, a, b in zip(d["weights"], dims[:-1], dims[1:])]
        return cls(weights, [np.asarray(b, dtype=np.float64) for b in d["biases"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "FeatureNet":
        return cls.from_dict(json.loads(s))


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def fresh(cls, params, lr: float, **kw) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and moments must align")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
