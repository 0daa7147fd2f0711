import math

import numpy as np
import pytest

from dmia.featurenet import FeatureNet
from dmia.kernels import DeepKernel, deep_gram, gaussian_gram
from dmia.mmd import (
    MmdEstimate,
    dmia_loss_and_grad,
    h_matrix,
    mmd2_u,
    mmd_estimate,
    normalized_stat,
    variance_reg,
)
from dmia.numeric import RngStream


def grams(X, Y, gamma):
    return gaussian_gram(X, X, gamma), gaussian_gram(Y, Y, gamma), gaussian_gram(X, Y, gamma)


def test_hand_case_value():
    X = np.zeros((2, 1))
    Y = np.ones((2, 1))
    assert mmd2_u(*grams(X, Y, 1.0)) == pytest.approx(2 - 2 * math.exp(-0.5), abs=1e-12)
    # frozen decimal for the same quantity
    assert 2 - 2 * math.exp(-0.5) == pytest.approx(0.786938680574733, abs=1e-15)


def test_identical_samples_give_zero():
    X = np.random.default_rng(0).standard_normal((6, 2))
    K = gaussian_gram(X, X, 1.0)
    # general form keeps the self-pairs in the cross term, so it is slightly negative
    assert mmd2_u(K, K, K, paired=True) == pytest.approx(0.0, abs=1e-15)
    assert np.all(h_matrix(K, K, K) == 0)


def test_swap_symmetry(gen):
    X, Y = gen.standard_normal((7, 3)), gen.standard_normal((5, 3)) + 0.5
    KXX, KYY, KXY = grams(X, Y, 1.2)
    assert mmd2_u(KXX, KYY, KXY) == pytest.approx(mmd2_u(KYY, KXX, KXY.T), abs=1e-14)


def test_general_form_against_double_loop(gen):
    X, Y = gen.standard_normal((5, 2)), gen.standard_normal((4, 2))
    k = lambda a, b: math.exp(-np.sum((a - b) ** 2) / 2)
    xx = sum(k(X[i], X[j]) for i in range(5) for j in range(5) if i != j) / 20
    yy = sum(k(Y[i], Y[j]) for i in range(4) for j in range(4) if i != j) / 12
    xy = sum(k(x, y) for x in X for y in Y) / 20
    assert mmd2_u(*grams(X, Y, 1.0)) == pytest.approx(xx + yy - 2 * xy, abs=1e-13)


def test_paired_form_is_off_diagonal_mean_of_h():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(2, 20))
        X, Y = rng.standard_normal((n, 3)), rng.standard_normal((n, 3)) + rng.random()
        KXX, KYY, KXY = grams(X, Y, 0.5 + rng.random())
        H = h_matrix(KXX, KYY, KXY)
        off = (H.sum() - np.trace(H)) / (n * (n - 1))
        assert abs(mmd2_u(KXX, KYY, KXY, paired=True) - off) < 1e-12


def test_variance_constant_h_is_lambda():
    for c in (0.0, 0.1, 1 / 3, 2.5):
        for n in (2, 7, 128):
            assert variance_reg(np.full((n, n), c), 1e-8) == 1e-8


def test_variance_against_triple_loop(gen):
    n = 6
    A = gen.standard_normal((n, n))
    H = A + A.T
    t1 = sum(sum(H[i, j] for j in range(n)) ** 2 for i in range(n))
    t2 = sum(H[i, j] for i in range(n) for j in range(n)) ** 2
    ref = 4 / n**3 * t1 - 4 / n**4 * t2
    assert variance_reg(H, 1e-8) == pytest.approx(ref + 1e-8, rel=1e-10)


def test_variance_rejects_bad_lambda():
    with pytest.raises(ValueError):
        variance_reg(np.eye(3), 0.0)


def test_normalized_stat_trivial():
    assert normalized_stat(MmdEstimate(0.0, 1.0, 10)) == 0.0
    assert normalized_stat(MmdEstimate(2.0, 4.0, 10)) == 1.0


def test_null_unbiased_and_calibrated():
    root = RngStream(2024)
    vals, stats = [], []
    for i in range(200):
        g = root.derive(i).generator()
        X, Y = g.standard_normal((100, 5)), g.standard_normal((100, 5))
        e = mmd_estimate(*grams(X, Y, math.sqrt(5)))
        vals.append(e.value)
        stats.append(normalized_stat(e))
    vals = np.array(vals)
    assert abs(vals.mean()) < 3 * vals.std(ddof=1) / math.sqrt(len(vals))
    assert np.mean(np.abs(stats) > 3) < 0.02


def test_power_against_shifted_mean():
    root = RngStream(7)
    hits = 0
    for i in range(200):
        g = root.derive(i).generator()
        X = g.standard_normal((100, 5))
        Y = g.standard_normal((100, 5)) + 2.0 / math.sqrt(5)
        hits += mmd2_u(*grams(X, Y, math.sqrt(5))) > 0
    assert hits >= 198


def test_size_errors():
    with pytest.raises(ValueError):
        mmd2_u(np.ones((1, 1)), np.ones((3, 3)), np.ones((1, 3)))
    with pytest.raises(ValueError):
        mmd2_u(np.ones((3, 3)), np.ones((3, 3)), np.ones((2, 3)))


# ------------------------------------------------------------ D-MIA loss

def _kernel(depth, eps, seed=0, d=2):
    return DeepKernel(FeatureNet.init(d, 6, 3, depth, RngStream(seed, 1)), eps, 1.0, 1.5)


def _batches(seed, n=8, d=2):
    g = RngStream(seed, 2).generator()
    return [g.standard_normal((n, d)) + s for s in (0.0, 0.3, 1.0)]


def _fd_rel_err(k, batches, objective="difference", h=1e-5):
    _, grads = dmia_loss_and_grad(k, *batches, objective=objective)
    worst = 0.0
    for pi, p in enumerate(k.net.params):
        for idx in np.ndindex(p.shape):
            ps = [q.copy() for q in k.net.params]
            ps[pi][idx] += h
            up = dmia_loss_and_grad(DeepKernel(k.net.with_params(ps), k.epsilon, k.gamma_phi, k.gamma_q),
                                    *batches, objective=objective)[0]
            ps[pi][idx] -= 2 * h
            dn = dmia_loss_and_grad(DeepKernel(k.net.with_params(ps), k.epsilon, k.gamma_phi, k.gamma_q),
                                    *batches, objective=objective)[0]
            fd, an = (up - dn) / (2 * h), grads[pi][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def test_loss_value_matches_gram_oracle():
    k = _kernel(2, 0.05)
    A, M, N = _batches(1)

    def m(X, Y):
        return mmd2_u(deep_gram(k, X, X), deep_gram(k, Y, Y), deep_gram(k, X, Y))

    loss, _ = dmia_loss_and_grad(k, A, M, N)
    assert loss == pytest.approx(m(A, M) - m(A, N), abs=1e-13)


def test_normalized_loss_value_matches_gram_oracle():
    k = _kernel(1, 0.05)
    A, M, N = _batches(2)

    def s(X, Y):
        return normalized_stat(mmd_estimate(deep_gram(k, X, X), deep_gram(k, Y, Y), deep_gram(k, X, Y)))

    loss, _ = dmia_loss_and_grad(k, A, M, N, objective="normalized")
    assert loss == pytest.approx(s(A, M) - s(A, N), rel=1e-11)


@pytest.mark.parametrize("depth", [1, 2, 3])
@pytest.mark.parametrize("eps", [0.0, 0.05])
def test_loss_gradient_finite_differences(depth, eps):
    assert _fd_rel_err(_kernel(depth, eps, seed=depth), _batches(depth)) < 1e-4


def test_normalized_loss_gradient_finite_differences():
    assert _fd_rel_err(_kernel(2, 0.05, seed=4), _batches(4), objective="normalized") < 1e-4


def test_epsilon_gradient_finite_differences():
    A, M, N = _batches(5)
    k = _kernel(2, 0.3, seed=5)
    _, _, d_eps = dmia_loss_and_grad(k, A, M, N, grad_epsilon=True)

    def at(e):
        return dmia_loss_and_grad(DeepKernel(k.net, e, k.gamma_phi, k.gamma_q), A, M, N)[0]

    assert d_eps == pytest.approx((at(0.3 + 1e-6) - at(0.3 - 1e-6)) / 2e-6, rel=1e-5)


def test_epsilon_one_gives_zero_net_gradient():
    _, grads = dmia_loss_and_grad(_kernel(3, 1.0), *_batches(6))
    assert all(np.all(g == 0) for g in grads)


def test_proxy_equal_to_nonmember_gives_zero_loss():
    A, M, _ = _batches(7)
    loss, grads = dmia_loss_and_grad(_kernel(2, 0.05), A, M, M)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_unequal_batch_sizes_supported():
    g = np.random.default_rng(0)
    A, M, N = g.standard_normal((6, 2)), g.standard_normal((9, 2)), g.standard_normal((4, 2))
    loss, grads = dmia_loss_and_grad(_kernel(1, 0.05), A, M, N)
    assert np.isfinite(loss)
    with pytest.raises(ValueError):
        dmia_loss_and_grad(_kernel(1, 0.05), A, M, N, objective="normalized")


def test_loss_rejects_tiny_batches():
    A, M, N = _batches(8)
    with pytest.raises(ValueError):
        dmia_loss_and_grad(_kernel(1, 0.05), A[:1], M, N)
