import numpy as np
import pytest

from dmia.kernels import gaussian_gram, median_bandwidth
from dmia.mmd import mmd2_u
from dmia.numeric import RngStream
from dmia.worldsim import (
    EncoderHandle,
    WorldSpec,
    build_world,
    encode,
    make_candidate,
    n_members_for,
)


def test_single_gaussian_student_moments():
    spec = WorldSpec(dim=4, n_components=1, mean_spread=0.0, teacher_components=1,
                     student_components=1, n_member=20000, n_teacher_gen=20000,
                     n_student_gen=20000, teacher_replay=0.0, n_nonmember=500,
                     n_nonmember_heldout=500, n_holdout=500, seed=3)
    w = build_world(spec)
    S = w.D_student_gen
    assert np.max(np.abs(S.mean(axis=0))) < 0.1
    assert np.max(np.abs(np.cov(S.T) - np.eye(4))) < 0.15


def test_same_seed_same_world(small_world):
    again = build_world(small_world.spec)
    assert again.digest() == small_world.digest()


def test_different_seed_different_world(small_world):
    from dataclasses import replace
    assert build_world(replace(small_world.spec, seed=1)).digest() != small_world.digest()


def test_pool_sizes_and_disjointness(small_world):
    w = small_world
    s = w.spec
    assert w.D_mem.shape == (s.n_member, s.dim)
    assert w.D_non.shape == (s.n_nonmember, s.dim)
    assert w.D_student_gen.shape == (s.n_student_gen, s.dim)
    rows = lambda X: {tuple(r) for r in X}
    assert not rows(w.D_mem) & rows(w.D_non)
    assert not rows(w.D_non) & rows(w.D_non_heldout)
    assert not rows(w.D_mem) & rows(w.D_holdout)


def test_memory_chain_on_reference_world(reference_world):
    w = reference_world
    gamma = median_bandwidth(np.vstack([w.D_student_gen[:500], w.D_mem[:500], w.D_non[:500]]))
    root = RngStream(0).derive("memory_chain")
    wins = 0
    for i in range(100):
        g = root.derive(i).generator()
        S = w.D_student_gen[g.choice(len(w.D_student_gen), 200, replace=False)]
        M = w.D_mem[g.choice(len(w.D_mem), 200, replace=False)]
        N = w.D_non[g.choice(len(w.D_non), 200, replace=False)]

        def m(X, Y):
            return mmd2_u(gaussian_gram(X, X, gamma), gaussian_gram(Y, Y, gamma), gaussian_gram(X, Y, gamma))

        wins += m(S, M) < m(S, N)
    assert wins >= 90


def test_candidate_counts(small_world):
    w = small_world
    member_rows = {tuple(r) for r in w.D_mem}
    for rho, size, expect in [(1.0, 50, 50), (0.0, 50, 0), (0.3, 10, 3), (0.5, 7, 4)]:
        C = make_candidate(w, rho, size, RngStream(1, 2))
        assert len(C) == size
        assert sum(tuple(r) in member_rows for r in C) == expect
    assert n_members_for(0.3, 10) == 3


def test_candidate_rejects_bad_ratio(small_world):
    with pytest.raises(ValueError):
        make_candidate(small_world, 1.5, 10, RngStream(0))


def test_encoder_linear_and_deterministic(gen):
    enc = EncoderHandle.random_projection(8, 5, RngStream(3))
    X, Y = gen.standard_normal((4, 8)), gen.standard_normal((4, 8))
    np.testing.assert_allclose(encode(enc, 2 * X + Y), 2 * encode(enc, X) + encode(enc, Y), atol=1e-12)
    np.testing.assert_array_equal(encode(enc, X), encode(EncoderHandle.from_dict(enc.to_dict()), X))
    np.testing.assert_array_equal(encode(EncoderHandle(), X), X)


@pytest.mark.parametrize("bad", [dict(dim=0), dict(nonmember_shift=0.1), dict(cov_scale=-1.0),
                                 dict(n_components=0)])
def test_invalid_spec_rejected(bad):
    with pytest.raises(ValueError):
        WorldSpec(**bad)


def test_spec_dict_round_trip():
    spec = WorldSpec(seed=9, encoder="projection", encoder_dim=4)
    assert WorldSpec.from_dict(spec.to_dict()) == spec
