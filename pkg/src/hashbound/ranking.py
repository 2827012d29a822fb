"""Rank lists and retrieval metrics for binary hash codes.

A rank list orders base samples by ascending Hamming distance to a query,
breaking distance ties by ascending sample id so results are reproducible.
Average precision is computed through the mis-rank count m (the number of
false positives ranked above a given true positive): precision at a relevant
rank i equals (i - m) / i, and AP is the mean of those precisions over all
relevant entries. The remaining metrics (P@K, recall, F-score, PR points,
precision inside a Hamming ball, kNN voting) share the same rank lists.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

from .codes import BitCode, hamming_matrix
from .errors import EmptyBallError, InvalidInputError, UndefinedMetricError

__all__ = [
    "RankEntry",
    "RankList",
    "MetricReport",
    "MapResult",
    "build_rank_list",
    "mis_rank",
    "average_precision",
    "map_at_r",
    "precision_at_k",
    "recall_at_rank",
    "f_score_at_rank",
    "pr_points",
    "precision_in_hamming_ball",
    "knn_predict",
    "as_label_set",
]


@dataclass(frozen=True, slots=True)
class RankEntry:
    sample_id: int
    distance: int
    relevant: bool


@dataclass(frozen=True, slots=True)
class RankList:
    """Base samples sorted by (distance, sample id) for one query."""

    query_id: int
    entries: tuple[RankEntry, ...]

    def __post_init__(self) -> None:
        prev = None
        for e in self.entries:
            if e.distance < 0:
                raise InvalidInputError("distances must be non-negative")
            if prev is not None:
                if e.distance < prev.distance:
                    raise InvalidInputError("entries must be sorted by distance")
                if e.distance == prev.distance and e.sample_id <= prev.sample_id:
                    raise InvalidInputError("distance ties must be sorted by sample id")
            prev = e

    def __len__(self) -> int:
        return len(self.entries)

    def relevance(self) -> np.ndarray:
        return np.array([e.relevant for e in self.entries], dtype=bool)


@dataclass(frozen=True, slots=True)
class MetricReport:
    """Bundle of retrieval metrics for one query."""

    ap: float
    precision_at_k: tuple[tuple[int, float], ...]
    pr_points: tuple[tuple[float, float], ...]
    precision_at_h2: float | None
    tp_count: int
    fp_count: int

    def __post_init__(self) -> None:
        values = [self.ap]
        values += [p for _, p in self.precision_at_k]
        values += [v for point in self.pr_points for v in point]
        if self.precision_at_h2 is not None:
            values.append(self.precision_at_h2)
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise InvalidInputError("precisions and recalls must lie in [0, 1]")


@dataclass(frozen=True, slots=True)
class MapResult:
    """Mean AP over queries; queries with no relevant base samples are skipped."""

    value: float
    num_queries: int
    num_skipped: int
    per_query: tuple[float | None, ...]


def build_rank_list(
    query: BitCode,
    base: Sequence[tuple[BitCode, bool]],
    query_id: int = 0,
) -> RankList:
    """Rank all base samples by distance to the query, ties by ascending id."""
    if len(base) == 0:
        raise InvalidInputError("cannot rank an empty base")
    codes = [code for code, _ in base]
    dists = hamming_matrix([query], codes)[0]
    order = np.lexsort((np.arange(len(base)), dists))
    entries = tuple(
        RankEntry(int(i), int(dists[i]), bool(base[i][1])) for i in order
    )
    return RankList(query_id, entries)


def mis_rank(rank_list: RankList, rank_i: int) -> int:
    """Number of false positives ranked strictly above the true positive at rank_i (1-based)."""
    if not 1 <= rank_i <= len(rank_list):
        raise InvalidInputError(f"rank {rank_i} out of range 1..{len(rank_list)}")
    if not rank_list.entries[rank_i - 1].relevant:
        raise InvalidInputError(f"entry at rank {rank_i} is not a true positive")
    return sum(1 for e in rank_list.entries[: rank_i - 1] if not e.relevant)


def average_precision(rank_list: RankList) -> float:
    """AP = (1/|TP|) * sum over relevant ranks i of (i - m) / i."""
    terms = []
    for i, entry in enumerate(rank_list.entries, start=1):
        if entry.relevant:
            m = mis_rank(rank_list, i)
            terms.append((i - m) / i)
    if not terms:
        raise UndefinedMetricError("AP is undefined for a list with no relevant entries")
    return sum(terms) / len(terms)


def as_label_set(labels) -> frozenset:
    """Normalize a label or collection of labels to a frozenset."""
    if isinstance(labels, frozenset):
        return labels
    if isinstance(labels, (set, list, tuple)):
        return frozenset(labels)
    if isinstance(labels, Hashable):
        return frozenset((labels,))
    raise InvalidInputError(f"labels must be hashable, got {type(labels)!r}")


def _ap_of_ranked_relevance(rel: np.ndarray) -> float | None:
    """AP of a relevance vector already in rank order; None when no entry is relevant.

    Identical arithmetic to average_precision: at the j-th relevant entry,
    ranked i-th overall, i - m equals the running relevant count.
    """
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return None
    precisions = np.arange(1, hits.size + 1, dtype=np.float64) / (hits + 1)
    # Sequential sum keeps this bitwise identical to average_precision.
    return sum(precisions.tolist()) / hits.size


def map_at_r(
    queries: Sequence[tuple[BitCode, object]],
    base: Sequence[tuple[BitCode, object]],
    r: int | None = None,
) -> MapResult:
    """Mean AP over queries with each rank list truncated to its top r entries.

    queries and base pair each code with its label or label collection; a base
    sample is relevant to a query when their label sets intersect. Queries
    whose truncated list contains no relevant sample are skipped and counted.
    """
    if len(queries) == 0 or len(base) == 0:
        raise InvalidInputError("need at least one query and one base sample")
    if r is not None and r < 1:
        raise InvalidInputError(f"cutoff must be >= 1, got {r}")
    q_codes = [code for code, _ in queries]
    b_codes = [code for code, _ in base]
    q_labels = [as_label_set(lab) for _, lab in queries]
    b_labels = [as_label_set(lab) for _, lab in base]
    dists = hamming_matrix(q_codes, b_codes)
    ids = np.arange(len(base))

    # Group base samples by distinct label set so relevance is computed once
    # per (query label set, base label set) pair.
    group_of: dict[frozenset, int] = {}
    b_groups = np.empty(len(b_labels), dtype=np.int64)
    groups: list[frozenset] = []
    for idx, s in enumerate(b_labels):
        g = group_of.setdefault(s, len(groups))
        if g == len(groups):
            groups.append(s)
        b_groups[idx] = g
    cut = len(base) if r is None else min(r, len(base))

    rel_cache: dict[frozenset, np.ndarray] = {}
    aps: list[float | None] = []
    for qi, q_set in enumerate(q_labels):
        rel = rel_cache.get(q_set)
        if rel is None:
            by_group = np.array([bool(q_set & g_set) for g_set in groups], dtype=bool)
            rel = by_group[b_groups]
            rel_cache[q_set] = rel
        order = np.lexsort((ids, dists[qi]))[:cut]
        aps.append(_ap_of_ranked_relevance(rel[order]))
    kept = [a for a in aps if a is not None]
    if not kept:
        raise UndefinedMetricError("every query had zero relevant base samples")
    return MapResult(
        value=float(sum(kept) / len(kept)),
        num_queries=len(kept),
        num_skipped=len(aps) - len(kept),
        per_query=tuple(aps),
    )


def precision_at_k(rank_list: RankList, k: int) -> float:
    """Fraction of the top k entries that are relevant."""
    if not 1 <= k <= len(rank_list):
        raise InvalidInputError(f"k={k} out of range 1..{len(rank_list)}")
    return sum(1 for e in rank_list.entries[:k] if e.relevant) / k


def recall_at_rank(rank_list: RankList, i: int, total_relevant: int) -> float:
    """Recall at a relevant rank i: (i - m) / total_relevant."""
    if total_relevant < 1:
        raise InvalidInputError("total_relevant must be >= 1")
    m = mis_rank(rank_list, i)
    return (i - m) / total_relevant


def f_score_at_rank(rank_list: RankList, i: int, total_relevant: int) -> float:
    """F-score at a relevant rank i: 2 * (i - m) / (i + total_relevant)."""
    if total_relevant < 1:
        raise InvalidInputError("total_relevant must be >= 1")
    m = mis_rank(rank_list, i)
    return 2 * (i - m) / (i + total_relevant)


def pr_points(rank_list: RankList, total_relevant: int) -> tuple[tuple[float, float], ...]:
    """(recall, precision) at every relevant rank, in rank order."""
    points = []
    for i, entry in enumerate(rank_list.entries, start=1):
        if entry.relevant:
            m = mis_rank(rank_list, i)
            points.append(((i - m) / total_relevant, (i - m) / i))
    return tuple(points)


def precision_in_hamming_ball(
    query: BitCode,
    base: Sequence[tuple[BitCode, bool]],
    radius: int = 2,
) -> float:
    """Fraction of relevant samples among base codes within the given radius."""
    if radius < 0:
        raise InvalidInputError("radius must be >= 0")
    if len(base) == 0:
        raise InvalidInputError("cannot search an empty base")
    dists = hamming_matrix([query], [code for code, _ in base])[0]
    inside = np.flatnonzero(dists <= radius)
    if inside.size == 0:
        raise EmptyBallError(f"no base samples within distance {radius}")
    hits = sum(1 for i in inside if base[i][1])
    return hits / inside.size


def knn_predict(
    query: BitCode,
    base: Sequence[tuple[BitCode, object]],
    k: int = 100,
) -> object:
    """Majority label among the k nearest base samples.

    Neighbor ties break by ascending sample id; label-count ties break by the
    smallest label.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if len(base) < k:
        raise InvalidInputError(f"base holds {len(base)} samples, need at least k={k}")
    dists = hamming_matrix([query], [code for code, _ in base])[0]
    order = np.lexsort((np.arange(len(base)), dists))[:k]
    counts: dict = {}
    for i in order:
        label = base[i][1]
        counts[label] = counts.get(label, 0) + 1
    best = max(counts.values())
    return min(label for label, c in counts.items() if c == best)
