"""Ranking metrics: impression-weighted per-user AUC and relative improvement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    """No user had both a positive and a negative, or an invalid baseline."""


@dataclass
class EvalReport:
    per_user: list  # of (user_id, impressions, auc)
    weighted_auc: float
    skipped_users: int

    def to_dict(self) -> dict:
        return {
            "weighted_auc": self.weighted_auc,
            "per_user": [
                {"user_id": u, "impressions": n, "auc": a} for u, n, a in self.per_user
            ],
            "skipped_users": self.skipped_users,
        }


def user_auc(scores, labels) -> float:
    """AUC for one user's impressions via rank statistics, ties credited 0.5.

    Equivalent to the Mann-Whitney U statistic normalized by the number of
    positive-negative pairs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("user needs both a positive and a negative impression")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # midranks: average rank within each tied block (1-based)
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = float(np.sum(ranks[labels == 1]))
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def weighted_auc(rows) -> EvalReport:
    """Impression-weighted average of per-user AUCs.

    ``rows`` holds (user_id, score, label) or (user_id, score, label, weight)
    tuples; an integer weight counts as that many identical impressions.
    Users lacking either class are skipped and reported, not averaged.
    """
    by_user: dict = {}
    for row in rows:
        user, score, label = row[0], float(row[1]), int(row[2])
        weight = int(row[3]) if len(row) > 3 else 1
        if not np.isfinite(score):
            raise MetricError(f"non-finite score for user {user!r}")
        if weight < 1:
            raise MetricError(f"impression weight must be >= 1, got {weight}")
        by_user.setdefault(user, []).append((score, label, weight))

    per_user = []
    skipped = 0
    for user, rows_u in by_user.items():
        scores = np.repeat([s for s, _, _ in rows_u], [w for _, _, w in rows_u])
        labels = np.repeat([l for _, l, _ in rows_u], [w for _, _, w in rows_u])
        impressions = int(labels.size)
        try:
            auc = user_auc(scores, labels)
        except MetricError:
            skipped += 1
            continue
        per_user.append((user, impressions, auc))

    total = sum(n for _, n, _ in per_user)
    if total == 0:
        raise MetricError("every user was skipped; weighted AUC undefined")
    value = sum(n * a for _, n, a in per_user) / total
    return EvalReport(per_user=per_user, weighted_auc=value, skipped_users=skipped)


def rela_impr(measured_auc: float, base_auc: float) -> float:
    """Relative improvement of one model's AUC over a base, in percent (2 dp)."""
    if base_auc <= 0.0:
        raise MetricError(f"base AUC must be positive, got {base_auc}")
    return round((measured_auc / base_auc - 1.0) * 100.0, 2)
