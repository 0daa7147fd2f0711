"""Attack metrics: AUC, ASR, TPR at a capped FPR, and histogram emitters.

All functions take parallel arrays ``scores`` (higher means "predicted
member") and boolean ``labels`` (True for the positive class). A sample is
predicted positive when its score is ``>=`` the threshold. AUC counts ties as
one half (Mann-Whitney convention).
"""

from __future__ import annotations

import csv
import io
import json

import numpy as np
from scipy.stats import rankdata

CONVENTION = "predict positive iff score >= threshold; AUC ties count 1/2"


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if labels.all() or not labels.any():
        raise ValueError("both classes must be present")
    return scores, labels


def auc(scores, labels) -> float:
    scores, labels = _split(scores, labels)
    ranks = rankdata(scores)  # average ranks handle ties
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def asr(scores, labels, threshold: float) -> float:
    """Accuracy of the rule ``score >= threshold``."""
    scores, labels = _split(scores, labels)
    return float(np.mean((scores >= threshold) == labels))


def _candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    u = np.unique(scores)
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def best_asr(scores, labels, return_threshold: bool = False):
    """Maximum accuracy over thresholds at score midpoints (plus both extremes)."""
    scores, labels = _split(scores, labels)
    best, best_t = -1.0, None
    for t in _candidate_thresholds(scores):
        acc = float(np.mean((scores >= t) == labels))
        if acc > best:
            best, best_t = acc, t
    return (best, float(best_t)) if return_threshold else best


def roc_points(scores, labels):
    """(fpr, tpr) for every distinct threshold, from strictest to loosest."""
    scores, labels = _split(scores, labels)
    ts = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    pos, neg = scores[labels], scores[~labels]
    fpr = np.array([(neg >= t).mean() for t in ts])
    tpr = np.array([(pos >= t).mean() for t in ts])
    return fpr, tpr


def tpr_at_fpr(scores, labels, fpr_cap: float = 0.05) -> float:
    if not 0 < fpr_cap < 1:
        raise ValueError("fpr_cap must lie in (0, 1)")
    fpr, tpr = roc_points(scores, labels)
    return float(tpr[fpr <= fpr_cap].max())


def summary(scores, labels, fpr_cap: float = 0.05) -> dict:
    acc, thr = best_asr(scores, labels, return_threshold=True)
    return {
        "asr": acc,
        "asr_threshold": thr,
        "auc": auc(scores, labels),
        f"tpr_at_fpr_{fpr_cap:g}": tpr_at_fpr(scores, labels, fpr_cap),
        "convention": CONVENTION,
    }


def histogram(values, bins: int = 20, lo: float = 0.0, hi: float = 1.0) -> dict:
    """Fixed-width bin counts over ``[lo, hi]``."""
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=(lo, hi))
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def histogram_json(groups: dict, bins: int = 20, lo: float = 0.0, hi: float = 1.0) -> str:
    return json.dumps({name: histogram(v, bins, lo, hi) for name, v in groups.items()}, indent=2)


def histogram_csv(groups: dict, bins: int = 20, lo: float = 0.0, hi: float = 1.0) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "bin_lo", "bin_hi", "count"])
    for name, v in groups.items():
        h = histogram(v, bins, lo, hi)
        for a, b, c in zip(h["edges"][:-1], h["edges"][1:], h["counts"]):
            w.writerow([name, repr(a), repr(b), c])
    return buf.getvalue()
