"""Accuracy and beyond-accuracy metrics for top-k recommendation lists.

Relevance is binary. Per-user metrics return NaN when the relevant set is
empty; such users are skipped (and tallied) by :func:`aggregate_report`.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .corpus import Interaction

PER_USER_COLUMNS = ("user", "recall", "ndcg", "map", "mrr")
ECHO_COLUMNS = ("run", "fusion", "user_vector", "pipeline", "N", "K", "seed")
AGGREGATE_COLUMNS = ECHO_COLUMNS + (
    "n_users", "n_skipped", "recall", "ndcg", "map", "mrr", "coverage", "novelty", "tail_frac",
)


def _nan() -> float:
    return float("nan")


def recall_at_k(recommended: Sequence[int], relevant: set[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        return _nan()
    return len(set(recommended[:k]) & relevant) / len(relevant)


def ndcg_at_k(recommended: Sequence[int], relevant: set[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        return _nan()
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(recommended[:k]) if item in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(relevant))))
    return dcg / idcg


def map_at_k(recommended: Sequence[int], relevant: set[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        return _nan()
    hits = 0
    total = 0.0
    for r, item in enumerate(recommended[:k], start=1):
        if item in relevant:
            hits += 1
            total += hits / r
    return total / min(k, len(relevant))


def mrr(recommended: Sequence[int], relevant: set[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        return _nan()
    for r, item in enumerate(recommended[:k], start=1):
        if item in relevant:
            return 1.0 / r
    return 0.0


def coverage(rec_lists: Mapping[int, Sequence[int]], catalog_size: int) -> float:
    if catalog_size < 1:
        raise ValueError("catalog_size must be >= 1")
    union: set[int] = set()
    for items in rec_lists.values():
        union.update(items)
    return len(union) / catalog_size


def popularity_from_train(train: Iterable[Interaction], catalog: Iterable[int]) -> dict[int, float]:
    """``p(i) = count / total`` over training rows, floored at ``1 / total``."""
    counts: dict[int, int] = {}
    total = 0
    for r in train:
        counts[r.item_id] = counts.get(r.item_id, 0) + 1
        total += 1
    if total == 0:
        raise ValueError("empty training log")
    items = set(catalog) | set(counts)
    return {i: max(counts.get(i, 0), 1) / total for i in items}


def novelty(rec_lists: Mapping[int, Sequence[int]], popularity: Mapping[int, float]) -> float:
    """Mean self-information over every recommended slot (all users pooled)."""
    slots = [i for items in rec_lists.values() for i in items]
    if not slots:
        return _nan()
    return sum(-math.log2(popularity[i]) for i in slots) / len(slots)


def tail_fraction(rec_lists: Mapping[int, Sequence[int]], train_counts: Mapping[int, int], tau_tail: float = 2) -> float:
    if tau_tail < 0:
        raise ValueError("tau_tail must be >= 0")
    slots = [i for items in rec_lists.values() for i in items]
    if not slots:
        return _nan()
    return sum(1 for i in slots if train_counts.get(i, 0) < tau_tail) / len(slots)


def build_ground_truth(
    test: Iterable[Interaction],
    train: Iterable[Interaction],
    catalog: Iterable[int],
    threshold: float = 4.0,
) -> dict[int, frozenset[int]]:
    """Relevant test items per user: rating >= threshold, in the catalog, unseen in training."""
    catalog = set(catalog)
    seen: dict[int, set[int]] = {}
    for r in train:
        seen.setdefault(r.user_id, set()).add(r.item_id)
    out: dict[int, set[int]] = {}
    for r in test:
        out.setdefault(r.user_id, set())
        if r.rating >= threshold and r.item_id in catalog and r.item_id not in seen.get(r.user_id, ()):
            out[r.user_id].add(r.item_id)
    return {u: frozenset(s) for u, s in out.items()}


@dataclass(frozen=True)
class UserMetrics:
    recall: float
    ndcg: float
    map: float
    mrr: float


@dataclass
class MetricReport:
    per_user: dict[int, UserMetrics]
    aggregate: dict[str, float]
    skipped: tuple[int, ...] = ()
    config: dict[str, object] = field(default_factory=dict)

    def per_user_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PER_USER_COLUMNS)
        for u in sorted(self.per_user):
            m = self.per_user[u]
            w.writerow([u, fmt(m.recall), fmt(m.ndcg), fmt(m.map), fmt(m.mrr)])
        return buf.getvalue()

    def aggregate_row(self) -> list[str]:
        row = [str(self.config.get(c, "")) for c in ECHO_COLUMNS]
        row += [str(len(self.per_user)), str(len(self.skipped))]
        row += [fmt(self.aggregate[c]) for c in AGGREGATE_COLUMNS[len(ECHO_COLUMNS) + 2 :]]
        return row

    def aggregate_csv(self) -> str:
        return aggregate_csv([self])


def aggregate_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_COLUMNS)
    for r in reports:
        w.writerow(r.aggregate_row())
    return buf.getvalue()


def fmt(x: float) -> str:
    """Fixed 6-significant-digit formatting used by every CSV export."""
    return f"{x:.6g}"


def evaluate_user(recommended: Sequence[int], relevant: set[int], k: int) -> UserMetrics:
    return UserMetrics(
        recall_at_k(recommended, relevant, k),
        ndcg_at_k(recommended, relevant, k),
        map_at_k(recommended, relevant, k),
        mrr(recommended, relevant, k),
    )


def aggregate_report(
    rec_lists: Mapping[int, Sequence[int]],
    ground_truth: Mapping[int, Iterable[int]],
    k: int,
    catalog_size: int,
    popularity: Mapping[int, float],
    train_counts: Mapping[int, int],
    tau_tail: float = 2,
    config: Mapping[str, object] | None = None,
) -> MetricReport:
    """Score every user with a recommendation list.

    Users with no relevant test items are skipped. Accuracy aggregates are
    unweighted means over scored users; beyond-accuracy metrics pool the top-k
    lists of the same users.
    """
    per_user: dict[int, UserMetrics] = {}
    skipped = []
    for u in sorted(rec_lists):
        relevant = set(ground_truth.get(u, ()))
        if not relevant:
            skipped.append(u)
            continue
        per_user[u] = evaluate_user(list(rec_lists[u]), relevant, k)
    if not per_user:
        raise ValueError("no user has a non-empty relevant set")
    scored = {u: list(rec_lists[u])[:k] for u in per_user}
    n = len(per_user)
    agg = {
        "recall": sum(m.recall for m in per_user.values()) / n,
        "ndcg": sum(m.ndcg for m in per_user.values()) / n,
        "map": sum(m.map for m in per_user.values()) / n,
        "mrr": sum(m.mrr for m in per_user.values()) / n,
        "coverage": coverage(scored, catalog_size),
        "novelty": novelty(scored, popularity),
        "tail_frac": tail_fraction(scored, train_counts, tau_tail),
    }
    cfg = dict(config or {})
    cfg.setdefault("K", k)
    return MetricReport(per_user, agg, tuple(skipped), cfg)
