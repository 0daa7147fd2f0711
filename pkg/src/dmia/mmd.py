"""Unbiased MMD^2 estimators, the regularised variance, and the D-MIA loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dmia.kernels import DeepKernel, block_backward, block_grams

DEFAULT_LAMBDA = 1e-8


@dataclass(frozen=True)
class MmdEstimate:
    value: float
    variance: float
    n: int


def _square(K, name):
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"{name} must be square, got {K.shape}")
    return K


def _offdiag_sum(K: np.ndarray) -> float:
    return float(K.sum() - np.trace(K))


def mmd2_u(KXX, KYY, KXY, paired: bool = False) -> float:
    """Unbiased MMD^2 from gram blocks.

    The default is the general two-sample form, whose cross term averages all
    ``n*m`` pairs. ``paired=True`` gives the equal-size form that also drops
    the cross-diagonal ``k(x_i, y_i)``; it is exactly the off-diagonal mean of
    :func:`h_matrix`.
    """
    KXX = _square(KXX, "KXX")
    KYY = _square(KYY, "KYY")
    KXY = np.asarray(KXY, dtype=np.float64)
    n, m = len(KXX), len(KYY)
    if n < 2 or m < 2:
        raise ValueError("need at least two samples on each side")
    if KXY.shape != (n, m):
        raise ValueError(f"KXY must be {(n, m)}, got {KXY.shape}")
    xx = _offdiag_sum(KXX) / (n * (n - 1))
    yy = _offdiag_sum(KYY) / (m * (m - 1))
    if paired:
        if n != m:
            raise ValueError("paired form needs equal sample sizes")
        return xx + yy - 2.0 * _offdiag_sum(KXY) / (n * (n - 1))
    return xx + yy - 2.0 * float(KXY.sum()) / (n * m)


def h_matrix(KXX, KYY, KXY) -> np.ndarray:
    KXX = _square(KXX, "KXX")
    KYY = _square(KYY, "KYY")
    KXY = np.asarray(KXY, dtype=np.float64)
    if not (KXX.shape == KYY.shape == KXY.shape):
        raise ValueError("h_matrix needs equal sample sizes on both sides")
    return KXX + KYY - KXY - KXY.T


def variance_reg(H, lam: float = DEFAULT_LAMBDA) -> float:
    """Regularised variance estimate of the MMD^2 U-statistic, floored at ``lam``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    H = _square(H, "H")
    n = len(H)
    if n < 2:
        raise ValueError("need n >= 2")
    return max(_raw_variance(H.sum(axis=1)), 0.0) + lam


def _raw_variance(r: np.ndarray) -> float:
    """``4/n^3 sum(r^2) - 4/n^4 sum(r)^2`` for row sums ``r`` of H.

    Evaluated on ``r - r[0]`` (the expression is shift invariant), which keeps
    it accurate when the row sums are nearly equal and exactly zero when they
    are all equal.
    """
    n = len(r)
    d = r - r[0]
    t = d.sum()
    return 4.0 / n**3 * (float(d @ d) - t * t / n)


def mmd_estimate(KXX, KYY, KXY, lam: float = DEFAULT_LAMBDA) -> MmdEstimate:
    value = mmd2_u(KXX, KYY, KXY)
    var = variance_reg(h_matrix(KXX, KYY, KXY), lam)
    return MmdEstimate(value, var, len(KXX))


def normalized_stat(e: MmdEstimate) -> float:
    return e.value / np.sqrt(e.variance)


# ---------------------------------------------------------------------------
# Each statistic is a function of gram blocks, so its gradient reduces to
# coefficient matrices dL/dK per block. Cross blocks are stored once (X, Y)
# with the coefficients of K_YX folded in.


def _offdiag(n: int, c: float) -> np.ndarray:
    C = np.full((n, n), c)
    np.fill_diagonal(C, 0.0)
    return C


def _pair_stat(K: dict, x: str, y: str, lam: float, normalized: bool):
    """One MMD^2 statistic between segments ``x`` and ``y``.

    Returns the value and ``{block_key: dStat/dK_block}``.
    """
    KXX, KYY, KXY = K[x, x], K[y, y], K[x, y]
    n, m = len(KXX), len(KYY)
    coeffs = {(x, x): _offdiag(n, 1.0 / (n * (n - 1))),
              (y, y): _offdiag(m, 1.0 / (m * (m - 1))),
              (x, y): np.full((n, m), -2.0 / (n * m))}
    value = sum(float(np.sum(C * K[key])) for key, C in coeffs.items())
    if not normalized:
        return value, coeffs
    H = h_matrix(KXX, KYY, KXY)
    r = H.sum(axis=1)
    s = r.sum()
    raw = _raw_variance(r)
    var = max(raw, 0.0) + lam
    sd = np.sqrt(var)
    out = {key: C / sd for key, C in coeffs.items()}
    if raw > 0:
        # dvar/dH_ij depends on i only
        P = np.repeat((8.0 / n**3 * r - 8.0 / n**4 * s)[:, None], n, axis=1)
        a = -0.5 * value / var**1.5
        out[x, x] = out[x, x] + a * P
        out[y, y] = out[y, y] + a * P
        out[x, y] = out[x, y] - a * (P + P.T)
    return value / sd, out


def dmia_loss_and_grad(
    k: DeepKernel,
    B_anc,
    B_mem_proxy,
    B_non,
    lam: float = DEFAULT_LAMBDA,
    objective: str = "difference",
    grad_epsilon: bool = False,
):
    """Member discrepancy minus non-member discrepancy, with exact gradients.

    ``loss = MMD2(anchor, proxy) - MMD2(anchor, non)`` under ``k``; minimising
    it pulls the anchor towards member-like data and pushes non-members away.
    With ``objective="normalized"`` each term is divided by its regularised
    standard deviation instead (equal batch sizes required).

    Returns ``(loss, grads)`` where ``grads`` follows ``k.net.params``; when
    ``grad_epsilon`` is set, ``(loss, grads, d_epsilon)``.
    """
    if objective not in ("difference", "normalized"):
        raise ValueError(f"unknown objective {objective!r}")
    segs = {name: np.asarray(b, dtype=np.float64)
            for name, b in zip(("anc", "mem", "non"), (B_anc, B_mem_proxy, B_non))}
    sizes = [len(b) for b in segs.values()]
    if min(sizes) < 2:
        raise ValueError("every batch needs at least two rows")
    if objective == "normalized" and len(set(sizes)) != 1:
        raise ValueError("normalized objective needs equal batch sizes")
    for b in segs.values():
        if b.ndim != 2 or b.shape[1] != k.in_dim:
            raise ValueError(f"expected inputs with {k.in_dim} columns, got {b.shape}")
    norm = objective == "normalized"
    if segs["mem"].shape == segs["non"].shape and np.array_equal(segs["mem"], segs["non"]):
        # the two terms cancel identically; skip the round-off of computing both
        zeros = [np.zeros_like(p) for p in k.net.params]
        return (0.0, zeros, 0.0) if grad_epsilon else (0.0, zeros)

    Z = np.vstack(list(segs.values()))
    F_all, cache = k.net.forward(Z, cache=True)
    bounds = np.cumsum([0] + sizes)
    F = {name: F_all[bounds[i]:bounds[i + 1]] for i, name in enumerate(segs)}

    # the anchor self-term cancels in the plain difference, so skip its block
    keys = [("anc", "mem"), ("anc", "non"), ("mem", "mem"), ("non", "non")]
    if norm:
        keys.append(("anc", "anc"))
    grams = {key: block_grams(k, segs[key[0]], F[key[0]], segs[key[1]], F[key[1]]) for key in keys}
    K = {key: g[0] for key, g in grams.items()}

    def stat(y):
        if norm:
            return _pair_stat(K, "anc", y, lam, True)
        # anchor self-term omitted on both sides: it cancels in the difference
        sub = dict(K)
        sub["anc", "anc"] = np.zeros((sizes[0], sizes[0]))
        v, c = _pair_stat(sub, "anc", y, lam, False)
        c.pop(("anc", "anc"))
        return v, c

    s_mem, c_mem = stat("mem")
    s_non, c_non = stat("non")
    coeffs = dict(c_mem)
    for key, C in c_non.items():
        coeffs[key] = coeffs[key] - C if key in coeffs else -C
    loss = s_mem - s_non

    dF = {name: np.zeros_like(f) for name, f in F.items()}
    d_eps = 0.0
    for key, C in coeffs.items():
        _, K_phi, Q = grams[key]
        a, b = key
        if a == b:
            buf = np.zeros_like(F[a])
            d_eps += block_backward(k, F[a], F[a], K_phi, Q, C, buf, buf)
            dF[a] += buf
        else:
            d_eps += block_backward(k, F[a], F[b], K_phi, Q, C, dF[a], dF[b])
    grads, _ = k.net.backward(Z, np.vstack(list(dF.values())), cache=cache)
    if grad_epsilon:
        return loss, grads, d_eps
    return loss, grads
