"""Gaussian base kernels and the composite deep kernel."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from dmia.featurenet import FeatureNet
from dmia.numeric import pairwise_sq_dists

# Bandwidth convention used everywhere: k(a, b) = exp(-|a - b|^2 / (2 gamma^2)).
BANDWIDTH_CONVENTION = "exp(-d^2/(2*gamma^2))"


def _gauss_from_sq(D: np.ndarray, gamma: float) -> np.ndarray:
    """Gaussian kernel values from squared distances. Overwrites ``D``."""
    D *= -0.5 / (gamma * gamma)
    return np.exp(D, out=D)


def gaussian_gram(A, B, gamma: float) -> np.ndarray:
    if not gamma > 0:
        raise ValueError(f"bandwidth must be positive, got {gamma}")
    return _gauss_from_sq(pairwise_sq_dists(A, B), gamma)


def median_bandwidth(X, max_points: int = 2000) -> float:
    """Median pairwise Euclidean distance between distinct rows of ``X``."""
    X = np.asarray(X, dtype=np.float64)[:max_points]
    D = pairwise_sq_dists(X)
    iu = np.triu_indices(len(X), k=1)
    med = float(np.sqrt(np.median(D[iu])))
    if not med > 0:
        raise ValueError("median heuristic degenerate: all points coincide")
    return med


@dataclass
class DeepKernel:
    """``k(a,b) = [(1-eps) k_phi(net(a), net(b)) + eps] * q(a, b)``.

    ``k_phi`` is Gaussian on features with bandwidth ``gamma_phi``; ``q`` is
    Gaussian on raw inputs with bandwidth ``gamma_q``.
    """

    net: FeatureNet
    epsilon: float
    gamma_phi: float
    gamma_q: float

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not (self.gamma_phi > 0 and self.gamma_q > 0):
            raise ValueError("bandwidths must be positive")

    @property
    def in_dim(self) -> int:
        return self.net.in_dim

    def to_dict(self) -> dict:
        return {
            "schema": "dmia.deep_kernel",
            "version": 1,
            "bandwidth_convention": BANDWIDTH_CONVENTION,
            "epsilon": self.epsilon,
            "gamma_phi": self.gamma_phi,
            "gamma_q": self.gamma_q,
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeepKernel":
        if d.get("schema") != "dmia.deep_kernel" or d.get("version") != 1:
            raise ValueError("not a version-1 deep kernel document")
        return cls(FeatureNet.from_dict(d["net"]), float(d["epsilon"]),
                   float(d["gamma_phi"]), float(d["gamma_q"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "DeepKernel":
        return cls.from_dict(json.loads(s))


def _check_in(k: DeepKernel, A: np.ndarray):
    if A.ndim != 2 or A.shape[1] != k.in_dim:
        raise ValueError(f"expected inputs with {k.in_dim} columns, got shape {A.shape}")


def deep_gram(k: DeepKernel, A, B=None) -> np.ndarray:
    """Gram matrix of the deep kernel between rows of ``A`` and ``B``."""
    A = np.asarray(A, dtype=np.float64)
    same = B is None or B is A
    B = A if B is None else np.asarray(B, dtype=np.float64)
    _check_in(k, A)
    _check_in(k, B)
    FA = k.net.forward(A)
    FB = FA if same else k.net.forward(B)
    K_phi = _gauss_from_sq(pairwise_sq_dists(FA, FA if same else FB), k.gamma_phi)
    Q = _gauss_from_sq(pairwise_sq_dists(A, A if same else B), k.gamma_q)
    return ((1.0 - k.epsilon) * K_phi + k.epsilon) * Q


def block_grams(k: DeepKernel, X, FX, Y, FY):
    """``(K, K_phi, Q)`` between two row blocks given their features."""
    same = Y is X
    K_phi = _gauss_from_sq(pairwise_sq_dists(FX, None if same else FY), k.gamma_phi)
    Q = _gauss_from_sq(pairwise_sq_dists(X, None if same else Y), k.gamma_q)
    return ((1.0 - k.epsilon) * K_phi + k.epsilon) * Q, K_phi, Q


def block_backward(k: DeepKernel, FX, FY, K_phi, Q, C, dFX, dFY):
    """Accumulate ``dL/dF`` for ``L = sum(C * K_XY)`` into ``dFX``/``dFY``.

    Returns this block's contribution to ``dL/d(epsilon)``. For a diagonal
    block pass the same arrays for X and Y.
    """
    G = (1.0 - k.epsilon) * C * Q * K_phi
    scale = 1.0 / k.gamma_phi ** 2
    dFX -= scale * (G.sum(axis=1)[:, None] * FX - G @ FY)
    dFY -= scale * (G.sum(axis=0)[:, None] * FY - G.T @ FX)
    return float(np.sum(C * (1.0 - K_phi) * Q))
