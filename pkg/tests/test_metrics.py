import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from dmia import metrics


def test_auc_partial_overlap():
    assert metrics.auc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == 0.75


def test_auc_perfect_and_ties():
    assert metrics.auc([3, 2, 1, 0], [1, 1, 0, 0]) == 1.0
    assert metrics.auc([1, 1, 1, 1], [1, 0, 1, 0]) == 0.5


def test_best_asr_example():
    assert metrics.best_asr([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == 0.75


def test_asr_at_threshold_positive_iff_at_least():
    assert metrics.asr([0.7, 0.69], [1, 0], 0.7) == 1.0


def test_tpr_at_fpr_example():
    scores = [0.9, 0.8, 0.3] + [0.5] * 20
    labels = [1, 1, 1] + [0] * 20
    assert metrics.tpr_at_fpr(scores, labels, 0.05) == pytest.approx(2 / 3)
    assert metrics.tpr_at_fpr([0.9, 0.3, 0.2, 0.5], [1, 1, 1, 0], 0.05) == pytest.approx(1 / 3)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        metrics.auc([0.1, 0.2], [1, 1])


labelled = st.integers(2, 40).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-100, 100), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n)).filter(lambda t: 0 < sum(t[1]) < n))


@settings(max_examples=100, deadline=None)
@given(labelled)
def test_auc_agrees_with_sklearn(t):
    s, y = t
    assert metrics.auc(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)


int_labelled = st.integers(2, 40).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-50, 50), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n)).filter(lambda t: 0 < sum(t[1]) < n))


@settings(max_examples=100, deadline=None)
@given(int_labelled)
def test_auc_invariant_under_monotone_transform(t):
    # integer scores keep the transform strictly increasing in floating point
    s, y = t
    assert metrics.auc(np.arctan(np.array(s) / 7) * 3 + 1, y) == pytest.approx(metrics.auc(s, y), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(labelled)
def test_auc_label_flip_complements(t):
    s, y = t
    flipped = [not v for v in y]
    assert metrics.auc(s, flipped) == pytest.approx(1 - metrics.auc(s, y), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(labelled, st.floats(-100, 100))
def test_asr_bounded_by_best(t, thr):
    s, y = t
    assert metrics.asr(s, y, thr) <= metrics.best_asr(s, y) + 1e-12
    assert metrics.best_asr(s, y) >= 0.5


@settings(max_examples=100, deadline=None)
@given(labelled)
def test_tpr_monotone_in_cap(t):
    s, y = t
    caps = [0.01, 0.05, 0.2, 0.5, 0.99]
    vals = [metrics.tpr_at_fpr(s, y, c) for c in caps]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))


def test_tpr_at_fpr_under_null():
    g = np.random.default_rng(0)
    vals = []
    for _ in range(200):
        s = g.random(400)
        y = g.random(400) < 0.5
        vals.append(metrics.tpr_at_fpr(s, y, 0.05))
    assert abs(np.mean(vals) - 0.05) < 0.02


def test_summary_and_histograms():
    s = metrics.summary([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0])
    assert s["auc"] == 0.75 and s["asr"] == 0.75
    h = metrics.histogram([0.0, 0.5, 0.99, 1.0], bins=4)
    assert sum(h["counts"]) == 4
    csv_text = metrics.histogram_csv({"a": [0.1, 0.2]}, bins=2)
    assert csv_text.splitlines()[0].startswith("group")
