"""Dense arithmetic helpers and the seedable, splittable random source."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Every call to :meth:`generator` returns a fresh generator positioned at the
    start of the stream, so consumers are pure functions of the stream value.
    Child streams are derived with :meth:`derive`; derivation is hashed through
    ``numpy.random.SeedSequence`` so siblings are statistically independent.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream_id <= _MASK64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def derive(self, *keys: int | str) -> "RngStream":
        words = [self.stream_id]
        for key in keys:
            if isinstance(key, str):
                # stable across processes, unlike hash()
                words.extend(key.encode("utf-8"))
                words.append(0x100)
            else:
                words.append(int(key) & _MASK64)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(words))
        lo, hi = ss.generate_state(2, dtype=np.uint32)
        return RngStream(self.seed, (int(hi) << 32) | int(lo))


def pairwise_sq_dists(A, B=None) -> np.ndarray:
    """Squared Euclidean distances between the rows of ``A`` and ``B``.

    Uses ``|a|^2 + |b|^2 - 2 a.b`` clamped at zero. When ``B`` is omitted (or is
    the same object as ``A``) the result is symmetrised with an exact-zero
    diagonal.
    """
    same = B is None or B is A
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = A if same else np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape} vs {B.shape}")
    a2 = np.einsum("ij,ij->i", A, A)
    b2 = a2 if same else np.einsum("ij,ij->i", B, B)
    D = A @ B.T
    D *= -2.0
    D += a2[:, None]
    D += b2[None, :]
    if same:
        # floating-point addition order differs between (i, j) and (j, i)
        D += D.T
        D *= 0.5
        np.fill_diagonal(D, 0.0)
    np.maximum(D, 0.0, out=D)
    return D


def gaussian_noise(shape, sigma: float, rng: RngStream) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return np.zeros(shape)
    return sigma * rng.generator().standard_normal(shape)


def subsample(D, b: int, rng: RngStream, replacement: bool = False) -> np.ndarray:
    """Draw ``b`` rows of ``D`` uniformly at random."""
    D = np.asarray(D)
    return D[subsample_indices(len(D), b, rng, replacement)]


def subsample_indices(n: int, b: int, rng: RngStream, replacement: bool = False) -> np.ndarray:
    if b < 0:
        raise ValueError("sample size must be nonnegative")
    if not replacement and b > n:
        raise ValueError(f"cannot draw {b} distinct rows from {n}")
    if replacement and n == 0 and b > 0:
        raise ValueError("cannot sample from an empty matrix")
    return draw_indices(rng.generator(), n, b, replacement)


def draw_indices(gen: np.random.Generator, n: int, b: int, replacement: bool = False) -> np.ndarray:
    if replacement:
        return gen.integers(0, n, size=b)
    return gen.choice(n, size=b, replace=False)
