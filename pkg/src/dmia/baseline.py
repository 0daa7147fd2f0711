"""Instance-level MIA baseline: distance to the nearest generated sample.

Members of an overfit generator tend to have a generated near-copy, so a small
nearest-neighbour distance suggests membership. The score is exact (linear
scan), computed in blocks to bound memory.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from dmia import metrics
from dmia.numeric import as_matrix, pairwise_sq_dists


@dataclass
class InstanceScoreTable:
    scores: np.ndarray  # lower means more member-like
    labels: np.ndarray  # True for members
    model_tag: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape:
            raise ValueError("one label per score")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "score", "label", "model"])
        for i, (s, l) in enumerate(zip(self.scores, self.labels)):
            w.writerow([i, repr(float(s)), "member" if l else "nonmember", self.model_tag])
        return buf.getvalue()


def nearest_sq_dist(queries, generated, block: int = 1024) -> np.ndarray:
    Q = as_matrix(queries, "queries")
    G = as_matrix(generated, "generated")
    if len(G) == 0:
        raise ValueError("generated set is empty")
    if Q.shape[1] != G.shape[1]:
        raise ValueError(f"dimension mismatch: {Q.shape[1]} vs {G.shape[1]}")
    out = np.empty(len(Q))
    for lo in range(0, len(Q), block):
        out[lo:lo + block] = pairwise_sq_dists(Q[lo:lo + block], G).min(axis=1)
    return out


def instance_scores(members, nonmembers, generated, model_tag: str = "") -> InstanceScoreTable:
    """Score member and non-member queries against one generated pool."""
    members = as_matrix(members, "members")
    nonmembers = as_matrix(nonmembers, "nonmembers")
    scores = nearest_sq_dist(np.vstack([members, nonmembers]), generated)
    labels = np.r_[np.ones(len(members), bool), np.zeros(len(nonmembers), bool)]
    return InstanceScoreTable(scores, labels, model_tag)


def instance_attack_metrics(t: InstanceScoreTable, fpr_cap: float = 0.05) -> dict:
    """ASR, AUC and TPR@FPR with ``-score`` as the membership statistic."""
    stat = -t.scores
    return {
        "asr": metrics.best_asr(stat, t.labels),
        "auc": metrics.auc(stat, t.labels),
        "tpr_at_fpr": metrics.tpr_at_fpr(stat, t.labels, fpr_cap),
    }


def teacher_student_gap(world, n_queries: int = 1000, nonmember_source: str = "nonmember") -> dict:
    """Instance attack against the teacher pool and the student pool of a world.

    ``nonmember_source`` picks the negative queries: ``"nonmember"`` uses
    held-out draws from the non-member distribution, ``"population"`` uses
    fresh draws from the member population the teacher never saw.
    """
    if nonmember_source == "nonmember":
        neg = world.D_non_heldout[:n_queries]
    elif nonmember_source == "population":
        neg = world.D_holdout[:n_queries]
    else:
        raise ValueError(f"unknown nonmember_source {nonmember_source!r}")
    pos = world.D_mem[:n_queries]
    out = {}
    for tag, pool in (("teacher", world.D_teacher_gen), ("student", world.D_student_gen)):
        out[tag] = instance_attack_metrics(instance_scores(pos, neg, pool, tag))
    out["auc_gap"] = out["teacher"]["auc"] - out["student"]["auc"]
    out["nonmember_source"] = nonmember_source
    return out
