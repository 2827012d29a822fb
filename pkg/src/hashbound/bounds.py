"""Class centers, compactness/distinctiveness statistics, and bound checks.

A class center is the bitwise majority vote of the class members, which
minimizes the summed Hamming distance to them. D_inter collects distances
between all center pairs, D_intra collects member-to-own-center distances,
and their robust extremes form the ratio that lower-bounds retrieval
performance. The verification operations here check the two triangle
inequality consequences (with the proof's explicit constant 2) and the
directional link between the mis-rank extreme and the distance ratio;
worst_case_ap evaluates the explicit worst arrangement instead of trusting
any closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as _scipy_stats

from .codes import BitCode, hamming_matrix, sign_matrix
from .errors import (
    InvalidInputError,
    UndefinedCorrelationError,
    UndefinedMetricError,
)
from .ranking import RankEntry, RankList, average_precision, mis_rank

__all__ = [
    "ClassStats",
    "RemarkReport",
    "class_center",
    "class_stats",
    "verify_remark_bounds",
    "worst_case_ap",
    "bound_correlation",
    "BOUND_CONSTANT",
]

# The "const" of the lower bound: the factor the triangle inequality puts in
# front of max(D_intra) in both verified inequalities.
BOUND_CONSTANT = 2


@dataclass(frozen=True)
class ClassStats:
    """Centers plus the distance multisets and robust bound ratio."""

    centers: Mapping[object, BitCode]
    d_inter: np.ndarray
    d_intra: np.ndarray
    ratio: float
    percentile: float

    def __post_init__(self) -> None:
        c = len(self.centers)
        if len(self.d_inter) != c * (c - 1) // 2:
            raise InvalidInputError("d_inter must hold one entry per center pair")
        if len(self.d_intra) and self.d_intra.min() < 0:
            raise InvalidInputError("d_intra entries must be non-negative")


def class_center(codes: Sequence[BitCode]) -> BitCode:
    """Bitwise majority vote; per-bit ties resolve to +1.

    This is an argmin of the summed Hamming distance to the class members.
    """
    if len(codes) == 0:
        raise InvalidInputError("cannot take the center of an empty class")
    votes = sign_matrix(codes).astype(np.int32).sum(axis=0)
    return BitCode.from_signs(np.where(votes >= 0, 1, -1).tolist())


def class_stats(
    codes: Sequence[BitCode],
    labels: Sequence[object],
    percentile: float = 99.9,
) -> ClassStats:
    """Centers, D_inter, D_intra, and the robust ratio for a labeled code set.

    The ratio divides the (100 - percentile)-th percentile of D_inter (a
    robust minimum) by the percentile-th percentile of D_intra (a robust
    maximum); percentile=100 degenerates to the plain min/max. When the
    robust maximum is 0 the ratio is reported as the +inf sentinel.
    """
    if len(codes) != len(labels):
        raise InvalidInputError("codes and labels must align")
    if not 0 < percentile <= 100:
        raise InvalidInputError("percentile must lie in (0, 100]")
    by_class: dict[object, list[int]] = {}
    for idx, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(idx)
    if len(by_class) < 2:
        raise UndefinedMetricError("the bound ratio needs at least two classes")

    class_order = list(by_class)
    centers = {
        lab: class_center([codes[i] for i in by_class[lab]]) for lab in class_order
    }
    center_list = [centers[lab] for lab in class_order]
    pairwise = hamming_matrix(center_list, center_list)
    iu = np.triu_indices(len(center_list), k=1)
    d_inter = pairwise[iu].astype(np.int64)

    d_intra = np.concatenate(
        [
            hamming_matrix([centers[lab]], [codes[i] for i in by_class[lab]])[0]
            for lab in class_order
        ]
    ).astype(np.int64)

    robust_min_inter = float(np.percentile(d_inter, 100.0 - percentile))
    robust_max_intra = float(np.percentile(d_intra, percentile))
    if robust_max_intra == 0.0:
        ratio = float("inf")
    else:
        ratio = robust_min_inter / robust_max_intra
    return ClassStats(
        centers=centers,
        d_inter=d_inter,
        d_intra=d_intra,
        ratio=ratio,
        percentile=percentile,
    )


@dataclass(frozen=True)
class RemarkReport:
    """Outcome of the directional mis-rank check (report, not an assertion)."""

    steps_checked: int
    violations: int
    initial_max_misrank: int
    final_max_misrank: int
    initial_ratio: float
    final_ratio: float


def _max_misrank(entries: list[tuple[int, int, bool]]) -> int:
    """Largest mis-rank over true positives; entries are (distance, id, relevant)."""
    ordered = sorted((d, i) for d, i, _ in entries)
    rank_of = {sid: rank for rank, (_, sid) in enumerate(ordered, start=1)}
    rl = RankList(
        0,
        tuple(
            RankEntry(sid, d, rel)
            for d, sid, rel in sorted(entries, key=lambda e: (e[0], e[1]))
        ),
    )
    worst = 0
    for d, sid, rel in entries:
        if rel:
            worst = max(worst, mis_rank(rl, rank_of[sid]))
    return worst


def _extreme_ratio(entries) -> float:
    tp = [d for d, _, rel in entries if rel]
    fp = [d for d, _, rel in entries if not rel]
    if not tp or not fp or min(fp) == 0:
        return float("nan")
    return max(tp) / min(fp)


def verify_remark_bounds(
    base: Sequence[tuple[BitCode, bool]],
    query: BitCode,
    seed: int = 0,
    max_steps: int = 200,
) -> RemarkReport:
    """Check that shrinking max d(q,tp) or growing min d(q,fp) never raises
    the maximal mis-rank.

    Starting from the instance's real rank list, repeatedly apply one of the
    two extreme-moving perturbations (keeping the perturbed sample the
    extreme, so the ratio strictly decreases and the rest of the order is
    preserved), regenerate the rank list, and compare the maximal mis-rank
    before and after. Returns counts only; it never raises on a violation.
    """
    if query.length > 10:
        raise InvalidInputError("directional check is exhaustive; needs h <= 10")
    if not 1 <= len(base) <= 64:
        raise InvalidInputError("instance must hold 1..64 samples")
    dists = hamming_matrix([query], [c for c, _ in base])[0]
    entries = [(int(dists[i]), i, bool(rel)) for i, (_, rel) in enumerate(base)]

    rng = np.random.default_rng(seed)
    checked = 0
    violations = 0
    initial_m = _max_misrank(entries)
    initial_ratio = _extreme_ratio(entries)
    m_before = initial_m
    for _ in range(max_steps):
        tps = [(d, i) for d, i, rel in entries if rel]
        fps = [(d, i) for d, i, rel in entries if not rel]
        moves = []
        if tps:
            d_max, i_max = max(tps)
            others = [d for d, i in tps if i != i_max]
            if d_max > 0 and (not others or d_max - 1 >= max(others)):
                moves.append(("shrink_tp", i_max))
        if fps:
            d_min, i_min = min(fps)
            others = [d for d, i in fps if i != i_min]
            if d_min < query.length and (not others or d_min + 1 <= min(others)):
                moves.append(("grow_fp", i_min))
        if not moves:
            break
        kind, target = moves[int(rng.integers(len(moves)))]
        delta = -1 if kind == "shrink_tp" else 1
        entries = [
            (d + delta if i == target else d, i, rel) for d, i, rel in entries
        ]
        m_after = _max_misrank(entries)
        checked += 1
        if m_after > m_before:
            violations += 1
        m_before = m_after
    return RemarkReport(
        steps_checked=checked,
        violations=violations,
        initial_max_misrank=initial_m,
        final_max_misrank=m_before,
        initial_ratio=initial_ratio,
        final_ratio=_extreme_ratio(entries),
    )


def worst_case_ap(min_d_fp: int, max_d_tp: int, n_tp: int) -> float:
    """AP of the explicit worst arrangement between the two distance extremes.

    With distinct, gapless integer distances the segment from min_d_fp to
    max_d_tp holds L = max_d_tp - min_d_fp + 1 samples; the worst case ranks
    all of its false positives (L - n_tp of them, the first at min_d_fp)
    before all of its true positives (the last at max_d_tp). The arrangement
    is built and evaluated; no closed form is trusted.
    """
    for name, v in (("min_d_fp", min_d_fp), ("max_d_tp", max_d_tp), ("n_tp", n_tp)):
        if not isinstance(v, (int, np.integer)):
            raise InvalidInputError(f"{name} must be an integer, got {v!r}")
    if min_d_fp < 0:
        raise InvalidInputError("distances must be non-negative")
    if min_d_fp >= max_d_tp:
        raise InvalidInputError("requires min_d_fp < max_d_tp")
    length = max_d_tp - min_d_fp + 1
    if not 1 <= n_tp <= length - 1:
        raise InvalidInputError(
            f"n_tp must lie in 1..{length - 1} for this distance span, got {n_tp}"
        )
    n_fp = length - n_tp
    entries = tuple(
        RankEntry(sample_id=j, distance=min_d_fp + j, relevant=(j >= n_fp))
        for j in range(length)
    )
    return average_precision(RankList(0, entries))


def bound_correlation(history: Sequence[tuple[float, float]]) -> float:
    """Spearman rank correlation between the ratio and mAP series."""
    if len(history) < 3:
        raise InvalidInputError("need at least 3 points for a rank correlation")
    ratios = [r for r, _ in history]
    maps = [m for _, m in history]
    if len(set(ratios)) == 1 or len(set(maps)) == 1:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    rho = _scipy_stats.spearmanr(ratios, maps).statistic
    if np.isnan(rho):
        raise UndefinedCorrelationError("correlation is undefined for this input")
    return float(rho)
