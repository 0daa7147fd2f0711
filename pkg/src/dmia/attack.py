"""Deep-kernel training, candidate detection and kernel ensembling."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from dmia.featurenet import AdamState, FeatureNet, adam_step
from dmia.kernels import DeepKernel, median_bandwidth
from dmia.mmd import DEFAULT_LAMBDA, dmia_loss_and_grad
from dmia.numeric import RngStream, draw_indices, pairwise_sq_dists, subsample_indices
from dmia.worldsim import EncoderHandle, encode

log = logging.getLogger(__name__)

# Loss sign actually optimised: minimise MMD2(anchor, proxy) - MMD2(anchor, non).
LOSS_SIGN = "minimize member_discrepancy - nonmember_discrepancy"

Sampler = Callable[[int, RngStream], np.ndarray]


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 128
    noise_std: float = 0.05
    n_generated: int = 2000
    hidden: int = 50
    depth: int = 3
    out_dim: int = 20
    epsilon: float = 0.05
    train_epsilon: bool = False
    gamma_phi: float | None = None
    gamma_q: float | None = None
    lam: float = DEFAULT_LAMBDA
    objective: str = "difference"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.objective not in ("difference", "normalized"):
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass
class DetectConfig:
    trials: int = 100
    batch_size: int = 128
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class TrainingLog:
    losses: list[float]
    initial_eval_loss: float
    final_eval_loss: float
    gamma_phi: float
    gamma_q: float
    loss_sign: str = LOSS_SIGN


@dataclass
class DetectionReport:
    indicators: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    p_mem: float
    kernel_id: int = 0

    def to_dict(self) -> dict:
        return {
            "kernel_id": self.kernel_id,
            "p_mem": self.p_mem,
            "indicators": self.indicators.astype(int).tolist(),
            "m1": self.m1.tolist(),
            "m2": self.m2.tolist(),
        }


@dataclass
class EnsembleReport:
    members: list[DetectionReport]
    p_bar: float
    tau: float
    decision: int

    def to_dict(self, per_trial: bool = True) -> dict:
        d = {"p_bar": self.p_bar, "tau": self.tau, "decision": self.decision,
             "p_mem": [m.p_mem for m in self.members]}
        if per_trial:
            d["members"] = [m.to_dict() for m in self.members]
        return d


def _noisy_batch(gen: np.random.Generator, X: np.ndarray, b: int, sigma: float) -> np.ndarray:
    """Draw ``b`` distinct rows and add N(0, sigma^2) noise (before encoding)."""
    rows = X[draw_indices(gen, len(X), b)]
    if sigma > 0:
        rows = rows + sigma * gen.standard_normal(rows.shape)
    return rows


def _init_kernel(cfg: TrainConfig, pool: np.ndarray, rng: RngStream) -> DeepKernel:
    net = FeatureNet.init(pool.shape[1], cfg.hidden, cfg.out_dim, cfg.depth, rng.derive("net"))
    probe = pool[subsample_indices(len(pool), min(len(pool), 1000), rng.derive("bandwidth"))]
    gamma_q = cfg.gamma_q or median_bandwidth(probe)
    gamma_phi = cfg.gamma_phi or median_bandwidth(net.forward(probe))
    return DeepKernel(net, cfg.epsilon, gamma_phi, gamma_q)


def split_generated(S_g: np.ndarray, rng: RngStream):
    """Randomly split generated rows into disjoint ``(proxy, anchor)`` halves."""
    perm = subsample_indices(len(S_g), len(S_g), rng)
    half = len(S_g) // 2
    return S_g[perm[:half]], S_g[perm[half:]]


def train_deep_kernel(D_non, student_sampler: Sampler, encoder: EncoderHandle,
                      cfg: TrainConfig, rng: RngStream | None = None,
                      return_log: bool = False):
    """Train a deep kernel that separates student-generated data from non-members.

    The student-generated pool is split in half into proxy-member and anchor
    pools, so anchor and proxy batches never share rows. Each epoch draws one
    batch from each pool and from ``D_non``, adds fresh Gaussian noise,
    encodes, and takes one Adam step on the D-MIA loss.

    Returns ``(kernel, anchor)`` where ``anchor`` is the last encoded anchor
    batch; with ``return_log`` a :class:`TrainingLog` is appended.
    """
    rng = rng or RngStream(cfg.seed)
    D_non = np.asarray(D_non, dtype=np.float64)
    B = cfg.batch_size
    if len(D_non) < 2 * B:
        raise ValueError(f"need at least {2 * B} non-member rows, got {len(D_non)}")
    if cfg.n_generated < 2 * B:
        raise ValueError(f"n_generated must be at least {2 * B}")
    S_g = np.asarray(student_sampler(cfg.n_generated, rng.derive("S_g")), dtype=np.float64)
    if len(S_g) < 2 * B:
        raise ValueError("student sampler produced too few rows")
    proxy_pool, anchor_pool = split_generated(S_g, rng.derive("split"))

    enc_pool = encode(encoder, np.vstack([S_g, D_non]))
    k = _init_kernel(cfg, enc_pool, rng.derive("init"))
    net = k.net

    def draw(r: RngStream):
        gen = r.generator()
        return [encode(encoder, _noisy_batch(gen, pool, B, cfg.noise_std))
                for pool in (anchor_pool, proxy_pool, D_non)]

    def loss_at(kernel, batches):
        return dmia_loss_and_grad(kernel, *batches, lam=cfg.lam, objective=cfg.objective)[0]

    eval_batches = draw(rng.derive("eval"))
    initial_eval = loss_at(k, eval_batches)

    params = net.params
    if cfg.train_epsilon:
        params = params + [np.array(k.epsilon)]
    state = AdamState.fresh(params, cfg.lr)
    eps = k.epsilon
    losses = []
    anchor = None
    for epoch in range(cfg.epochs):
        B_anc, B_mem, B_non = draw(rng.derive("epoch", epoch))
        kern = DeepKernel(net, eps, k.gamma_phi, k.gamma_q)
        loss, grads, d_eps = dmia_loss_and_grad(kern, B_anc, B_mem, B_non, lam=cfg.lam,
                                                objective=cfg.objective, grad_epsilon=True)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise NumericalError(f"non-finite loss/gradient at epoch {epoch}: loss={loss}")
        losses.append(float(loss))
        if cfg.train_epsilon:
            grads = grads + [np.array(d_eps)]
        params, state = adam_step(params, grads, state)
        if cfg.train_epsilon:
            eps = float(np.clip(params[-1], 0.0, 1.0))
            params[-1] = np.array(eps)
            net = net.with_params(params[:-1])
        else:
            net = net.with_params(params)
        anchor = B_anc

    kernel = DeepKernel(net, eps, k.gamma_phi, k.gamma_q)
    if not return_log:
        return kernel, anchor
    tlog = TrainingLog(losses, float(initial_eval), float(loss_at(kernel, eval_batches)),
                       k.gamma_phi, k.gamma_q)
    return kernel, anchor, tlog


class AnchorStats:
    """Cached anchor-side quantities for repeated MMD-to-anchor evaluations."""

    def __init__(self, k: DeepKernel, anchor):
        self.k = k
        self.A = np.asarray(anchor, dtype=np.float64)
        if len(self.A) < 2:
            raise ValueError("anchor needs at least two rows")
        self.F = k.net.forward(self.A)
        self.self_term = float(self.mmd2_terms(self.A[None])[0][0])

    def _combine(self, D_phi, D_q):
        """Deep-kernel values from squared distances; overwrites both inputs."""
        k = self.k
        D_phi *= -0.5 / k.gamma_phi**2
        np.exp(D_phi, out=D_phi)
        D_phi *= 1.0 - k.epsilon
        D_phi += k.epsilon
        D_q *= -0.5 / k.gamma_q**2
        np.exp(D_q, out=D_q)
        D_phi *= D_q
        return D_phi

    def mmd2_terms(self, Xs):
        """Per-batch ``(within-batch term, mean cross-kernel to anchor)``.

        ``Xs`` has shape ``(T, n, d)``: T batches evaluated at once.
        """
        Xs = np.asarray(Xs, dtype=np.float64)
        T, n, d = Xs.shape
        if n < 2:
            raise ValueError("batch needs at least two rows")
        flat = Xs.reshape(T * n, d)
        F = self.k.net.forward(flat)
        Fs = F.reshape(T, n, -1)

        def batched_sq(Y):
            sq = np.einsum("tnd,tnd->tn", Y, Y)
            G = Y @ Y.transpose(0, 2, 1)
            G *= -2.0
            G += sq[:, :, None]
            G += sq[:, None, :]
            np.maximum(G, 0.0, out=G)
            idx = np.arange(n)
            G[:, idx, idx] = 0.0
            return G

        KXX = self._combine(batched_sq(Fs), batched_sq(Xs))
        within = (KXX.sum(axis=(1, 2)) - n) / (n * (n - 1))  # unit diagonal
        KXA = self._combine(pairwise_sq_dists(F, self.F), pairwise_sq_dists(flat, self.A))
        cross = KXA.reshape(T, n, -1).mean(axis=(1, 2))
        return within, cross

    def mmd2_many(self, Xs) -> np.ndarray:
        within, cross = self.mmd2_terms(Xs)
        return within + self.self_term - 2.0 * cross

    def mmd2(self, X) -> float:
        """Unbiased MMD^2 between ``X`` and the anchor under the cached kernel."""
        return float(self.mmd2_many(np.asarray(X, dtype=np.float64)[None])[0])


def compare_batches(stats: AnchorStats, B_can, B_non) -> tuple[int, float, float]:
    """One Bernoulli trial: ``(1[M1 < M2], M1, M2)``."""
    m1 = stats.mmd2(B_can)
    m2 = stats.mmd2(B_non)
    return int(m1 < m2), m1, m2


def detect_candidate(D_can, D_non, anchor, k: DeepKernel, encoder: EncoderHandle,
                     cfg: DetectConfig, rng: RngStream | None = None,
                     kernel_id: int = 0, chunk: int = 25) -> DetectionReport:
    """Fraction of trials in which the candidate is closer to the anchor than non-members are.

    Batches and noise are redrawn every trial, so trials are independent
    Bernoulli draws given the pools. Trials are evaluated ``chunk`` at a time;
    each trial owns its random stream, so results do not depend on ``chunk``.
    """
    rng = rng or RngStream(cfg.seed)
    D_can = np.asarray(D_can, dtype=np.float64)
    D_non = np.asarray(D_non, dtype=np.float64)
    B = cfg.batch_size
    if len(D_can) < B or len(D_non) < B:
        raise ValueError(f"batch size {B} exceeds pool sizes ({len(D_can)}, {len(D_non)})")
    stats = AnchorStats(k, anchor)
    m1 = np.empty(cfg.trials)
    m2 = np.empty(cfg.trials)
    for lo in range(0, cfg.trials, chunk):
        ts = range(lo, min(lo + chunk, cfg.trials))
        can, non = [], []
        for t in ts:
            gen = rng.derive("trial", t).generator()
            can.append(_noisy_batch(gen, D_can, B, cfg.noise_std))
            non.append(_noisy_batch(gen, D_non, B, cfg.noise_std))
        m1[lo:lo + len(ts)] = stats.mmd2_many(encode_batches(encoder, np.stack(can)))
        m2[lo:lo + len(ts)] = stats.mmd2_many(encode_batches(encoder, np.stack(non)))
    ind = m1 < m2
    return DetectionReport(ind, m1, m2, float(ind.mean()), kernel_id)


def encode_batches(encoder: EncoderHandle, Xs: np.ndarray) -> np.ndarray:
    T, n, d = Xs.shape
    return encode(encoder, Xs.reshape(T * n, d)).reshape(T, n, -1)


@dataclass
class TrainedKernel:
    kernel: DeepKernel
    anchor: np.ndarray
    log: TrainingLog | None = None


def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def train_ensemble(D_non, student_sampler: Sampler, encoder: EncoderHandle, h: int,
                   cfg: TrainConfig, rng: RngStream | None = None,
                   threads: int = 1) -> list[TrainedKernel]:
    if h < 1:
        raise ValueError("ensemble size must be >= 1")
    rng = rng or RngStream(cfg.seed)

    def one(i):
        k, anc, tlog = train_deep_kernel(D_non, student_sampler, encoder, cfg,
                                         rng.derive("kernel", i), return_log=True)
        return TrainedKernel(k, anc, tlog)

    return _pmap(one, range(h), threads)


def threshold(p_bar: float, tau: float) -> int:
    return int(p_bar >= tau)


def detect_with_ensemble(D_can, D_non, kernels: list[TrainedKernel], encoder: EncoderHandle,
                         tau: float, cfg: DetectConfig, rng: RngStream | None = None,
                         threads: int = 1) -> EnsembleReport:
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    rng = rng or RngStream(cfg.seed)

    def one(i):
        tk = kernels[i]
        return detect_candidate(D_can, D_non, tk.anchor, tk.kernel, encoder, cfg,
                                rng.derive("kernel", i), kernel_id=i)

    members = _pmap(one, range(len(kernels)), threads)
    p_bar = float(np.mean([m.p_mem for m in members]))
    return EnsembleReport(members, p_bar, tau, threshold(p_bar, tau))


def ensemble_detect(D_can, D_non, student_sampler: Sampler, encoder: EncoderHandle, h: int,
                    tau: float, train_cfg: TrainConfig, detect_cfg: DetectConfig,
                    D_non_detect=None, rng: RngStream | None = None,
                    threads: int = 1) -> EnsembleReport:
    """Train ``h`` kernels on independent streams, detect with each, threshold the mean.

    ``D_non`` trains the kernels; ``D_non_detect`` (default: ``D_non``) is the
    non-member reference during detection.
    """
    rng = rng or RngStream(train_cfg.seed)
    kernels = train_ensemble(D_non, student_sampler, encoder, h, train_cfg,
                             rng.derive("train"), threads)
    ref = D_non if D_non_detect is None else D_non_detect
    return detect_with_ensemble(D_can, ref, kernels, encoder, tau, detect_cfg,
                                rng.derive("detect"), threads)
