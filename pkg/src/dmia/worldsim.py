"""Synthetic teacher/student distillation world.

A Gaussian-mixture "member" population trains a teacher; the teacher's samples
train a student. Non-members come from a perturbed copy of the member mixture.
The teacher additionally replays a fraction of jittered training rows, a
stand-in for the instance-level memorisation of real generative models; a
low-capacity student fitted to those outputs keeps the distributional pull
towards members but not the per-instance copies.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from dmia.numeric import RngStream, as_matrix

EM_MAX_ITER = 100
EM_TOL = 1e-6
EM_COV_FLOOR = 1e-6
EM_RESTARTS = 5


class WorldBuildError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    dim: int = 8
    n_components: int = 4
    mean_spread: float = 2.0
    cov_scale: float = 1.0
    nonmember_shift: float = 1.0
    teacher_components: int = 4
    n_member: int = 4000
    n_teacher_gen: int = 4000
    teacher_replay: float = 0.5
    replay_jitter: float = 0.05
    student_components: int = 4
    n_student_gen: int = 4000
    n_nonmember: int = 8000
    n_nonmember_heldout: int = 4000
    n_holdout: int = 2000
    encoder: str = "identity"
    encoder_dim: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.n_components < 1:
            raise ValueError("dim and n_components must be positive")
        if self.teacher_components < 1 or self.student_components < 1:
            raise ValueError("mixture fits need at least one component")
        if self.cov_scale <= 0:
            raise ValueError("cov_scale must be positive")
        if self.nonmember_shift < 0.5 * self.cov_scale:
            raise ValueError("non-member means must be shifted by at least 0.5 * cov_scale")
        if not 0.0 <= self.teacher_replay <= 1.0:
            raise ValueError("teacher_replay must lie in [0, 1]")
        if self.encoder not in ("identity", "projection"):
            raise ValueError(f"unknown encoder mode {self.encoder!r}")
        for name in ("n_member", "n_teacher_gen", "n_student_gen", "n_nonmember"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be at least 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        return cls(**d)


@dataclass(frozen=True)
class Mixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray  # (K, d, d)

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        gen = rng.generator()
        comp = gen.choice(len(self.weights), size=n, p=self.weights)
        z = gen.standard_normal((n, self.means.shape[1]))
        chol = np.linalg.cholesky(self.covs)
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)


def population_mixtures(spec: WorldSpec, rng: RngStream) -> tuple[Mixture, Mixture]:
    """Member and non-member mixtures; non-member means are shifted copies."""
    gen = rng.generator()
    K, d = spec.n_components, spec.dim
    means = spec.mean_spread * gen.standard_normal((K, d))
    w_mem = gen.dirichlet(np.full(K, 5.0))
    dirs = gen.standard_normal((K, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    w_non = gen.dirichlet(np.full(K, 5.0))
    covs = np.repeat((spec.cov_scale ** 2 * np.eye(d))[None], K, axis=0)
    member = Mixture(w_mem, means, covs)
    nonmember = Mixture(w_non, means + spec.nonmember_shift * dirs, covs)
    return member, nonmember


def fit_mixture(X: np.ndarray, n_components: int, rng: RngStream) -> Mixture:
    """EM fit (k-means++ seeding), restarting on non-convergence or collapse."""
    X = as_matrix(X, "training data")
    for attempt in range(EM_RESTARTS):
        seed = int(rng.derive("em", attempt).generator().integers(0, 2**31 - 1))
        gm = GaussianMixture(
            n_components=n_components,
            covariance_type="full",
            tol=EM_TOL,
            reg_covar=EM_COV_FLOOR,
            max_iter=EM_MAX_ITER,
            init_params="k-means++",
            random_state=seed,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            gm.fit(X)
        degenerate = np.any(gm.weights_ * len(X) < 2)
        if gm.converged_ and not degenerate:
            return Mixture(gm.weights_.copy(), gm.means_.copy(), gm.covariances_.copy())
    raise WorldBuildError(f"EM failed to converge after {EM_RESTARTS} restarts")


@dataclass(frozen=True)
class Teacher:
    """Fitted mixture that also replays jittered copies of its training rows."""

    mixture: Mixture
    train_rows: np.ndarray = field(repr=False)
    replay: float
    jitter: float

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        gen = rng.derive("replay").generator()
        copy = gen.random(n) < self.replay
        out = self.mixture.sample(n, rng.derive("mixture"))
        idx = gen.integers(0, len(self.train_rows), size=int(copy.sum()))
        noise = self.jitter * gen.standard_normal((len(idx), out.shape[1]))
        out[copy] = self.train_rows[idx] + noise
        return out


@dataclass(frozen=True)
class Student:
    mixture: Mixture

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        return self.mixture.sample(n, rng)


def distill_student(teacher_outputs: np.ndarray, n_components: int, rng: RngStream) -> Student:
    """Fit the student. It only ever receives teacher outputs."""
    return Student(fit_mixture(teacher_outputs, n_components, rng))


@dataclass(frozen=True)
class EncoderHandle:
    mode: str = "identity"
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.mode == "projection" and self.matrix is None:
            raise ValueError("projection encoder needs a matrix")
        if self.mode not in ("identity", "projection"):
            raise ValueError(f"unknown encoder mode {self.mode!r}")

    @classmethod
    def random_projection(cls, d_in: int, d_out: int, rng: RngStream) -> "EncoderHandle":
        m = rng.generator().standard_normal((d_in, d_out)) / np.sqrt(d_out)
        return cls("projection", m)

    def out_dim(self, d_in: int) -> int:
        return d_in if self.mode == "identity" else self.matrix.shape[1]

    def to_dict(self) -> dict:
        return {"mode": self.mode,
                "matrix": None if self.matrix is None else self.matrix.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderHandle":
        m = d.get("matrix")
        return cls(d["mode"], None if m is None else np.asarray(m, dtype=np.float64))


def encode(enc: EncoderHandle, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if enc.mode == "identity":
        return X
    if X.ndim != 2 or X.shape[1] != enc.matrix.shape[0]:
        raise ValueError(f"encoder expects {enc.matrix.shape[0]} columns, got {X.shape}")
    return X @ enc.matrix


@dataclass(frozen=True)
class WorldInstance:
    spec: WorldSpec
    D_mem: np.ndarray
    D_non: np.ndarray
    D_non_heldout: np.ndarray
    D_holdout: np.ndarray
    D_teacher_gen: np.ndarray
    D_student_gen: np.ndarray
    member_dist: Mixture
    nonmember_dist: Mixture
    teacher: Teacher
    student: Student
    encoder: EncoderHandle

    def student_sampler(self, n: int, rng: RngStream) -> np.ndarray:
        return self.student.sample(n, rng)

    def datasets(self) -> dict[str, np.ndarray]:
        return {
            "member": self.D_mem,
            "nonmember": self.D_non,
            "nonmember_heldout": self.D_non_heldout,
            "holdout": self.D_holdout,
            "teacher_gen": self.D_teacher_gen,
            "student_gen": self.D_student_gen,
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.datasets().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        for mix in (self.teacher.mixture, self.student.mixture):
            for a in (mix.weights, mix.means, mix.covs):
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def build_world(spec: WorldSpec) -> WorldInstance:
    root = RngStream(spec.seed).derive("world")
    member, nonmember = population_mixtures(spec, root.derive("population"))
    D_mem = member.sample(spec.n_member, root.derive("D_mem"))
    D_non = nonmember.sample(spec.n_nonmember, root.derive("D_non"))
    D_non_heldout = nonmember.sample(spec.n_nonmember_heldout, root.derive("D_non_heldout"))
    D_holdout = member.sample(spec.n_holdout, root.derive("D_holdout"))

    teacher = Teacher(fit_mixture(D_mem, spec.teacher_components, root.derive("teacher_fit")),
                      D_mem, spec.teacher_replay, spec.replay_jitter * spec.cov_scale)
    D_teacher_gen = teacher.sample(spec.n_teacher_gen, root.derive("teacher_gen"))
    student = distill_student(D_teacher_gen, spec.student_components, root.derive("student_fit"))
    D_student_gen = student.sample(spec.n_student_gen, root.derive("student_gen"))

    if spec.encoder == "identity":
        enc = EncoderHandle()
    else:
        enc = EncoderHandle.random_projection(spec.dim, spec.encoder_dim or spec.dim,
                                              root.derive("encoder"))
    return WorldInstance(spec, D_mem, D_non, D_non_heldout, D_holdout, D_teacher_gen,
                         D_student_gen, member, nonmember, teacher, student, enc)


def n_members_for(rho: float, size: int) -> int:
    # round first so 0.3 * 10 -> 3, not ceil(3.0000000000000004) -> 4
    return min(size, math.ceil(round(rho * size, 9)))


def make_candidate(w: WorldInstance, rho: float, size: int, rng: RngStream,
                   nonmember_pool: np.ndarray | None = None) -> np.ndarray:
    """Candidate set with ``ceil(rho * size)`` member rows, rest non-member, shuffled."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    pool = w.D_non_heldout if nonmember_pool is None else nonmember_pool
    k = n_members_for(rho, size)
    if k > len(w.D_mem) or size - k > len(pool):
        raise ValueError("candidate size exceeds the available pools")
    gen = rng.generator()
    rows = np.vstack([
        w.D_mem[gen.permutation(len(w.D_mem))[:k]],
        pool[gen.permutation(len(pool))[:size - k]],
    ])
    return rows[gen.permutation(size)]
