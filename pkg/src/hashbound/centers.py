"""Pre-defined class centers with large pairwise Hamming distance.

Two generators: rows of a Sylvester Hadamard matrix (and its negation) when
the bit length is a power of two, giving pairwise distance h/2 between
distinct rows, and a seeded random search with greedy bit-flip improvement
otherwise. Reported minimum pairwise distances are always re-verified by a
brute-force scan before returning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codes import BitCode, hamming_matrix, pack_sign_matrix
from .errors import HadamardNotApplicableError, InfeasibleError, InvalidInputError

__all__ = ["CenterSet", "hadamard_centers", "random_maxmin_centers"]


@dataclass(frozen=True)
class CenterSet:
    """One center per class, with the verified minimum pairwise distance.

    For a single class the minimum is vacuous and reported as h by
    convention.
    """

    centers: tuple[BitCode, ...]
    min_pairwise: int
    method: str

    def __post_init__(self) -> None:
        if len(self.centers) == 0:
            raise InvalidInputError("a center set cannot be empty")
        if self.method not in ("hadamard", "random-maxmin"):
            raise InvalidInputError(f"unknown method {self.method!r}")
        if len(set(self.centers)) != len(self.centers):
            raise InvalidInputError("centers must be pairwise distinct")
        if self.min_pairwise != _brute_force_min(self.centers):
            raise InvalidInputError(
                "min_pairwise does not match a brute-force pairwise scan"
            )

    @property
    def num_classes(self) -> int:
        return len(self.centers)


def _brute_force_min(centers) -> int:
    if len(centers) == 1:
        return centers[0].length
    mat = hamming_matrix(centers, centers)
    iu = np.triu_indices(len(centers), k=1)
    return int(mat[iu].min())


def _sylvester(h: int) -> np.ndarray:
    mat = np.array([[1]], dtype=np.int8)
    while mat.shape[0] < h:
        mat = np.block([[mat, mat], [mat, -mat]]).astype(np.int8)
    return mat


def hadamard_centers(num_classes: int, h: int) -> CenterSet:
    """Centers from the rows of the Sylvester Hadamard matrix H and of -H.

    Needs h a power of two and num_classes <= 2h; anything else raises
    HadamardNotApplicableError so the caller can fall back to the random
    search.
    """
    if num_classes < 1:
        raise InvalidInputError("need at least one class")
    if h < 1 or (h & (h - 1)) != 0:
        raise HadamardNotApplicableError(
            f"Sylvester construction needs a power-of-two bit length, got {h}"
        )
    if num_classes > 2 * h:
        raise HadamardNotApplicableError(
            f"Hadamard rows support at most {2 * h} classes at {h} bits, "
            f"got {num_classes}"
        )
    mat = _sylvester(h)
    rows = np.vstack([mat, -mat])[:num_classes]
    centers = tuple(pack_sign_matrix(rows))
    return CenterSet(
        centers=centers,
        min_pairwise=_brute_force_min(centers),
        method="hadamard",
    )


def _climb(signs: np.ndarray, max_passes: int = 200) -> np.ndarray:
    """Greedy first-improvement bit flips on the min-pairwise objective.

    The objective is lexicographic: raise the minimum pairwise distance
    first, then reduce how many pairs attain it.
    """
    c, h = signs.shape
    dist = (h - signs.astype(np.int32) @ signs.astype(np.int32).T) // 2
    np.fill_diagonal(dist, h + 1)

    def objective(d):
        m = d.min()
        return (int(m), -int((d == m).sum()))

    current = objective(dist)
    for _ in range(max_passes):
        improved = False
        for ci in range(c):
            for k in range(h):
                delta = np.where(signs[:, k] == signs[ci, k], 1, -1)
                delta[ci] = 0
                new_row = dist[ci] + delta
                trial = dist.copy()
                trial[ci, :] = new_row
                trial[:, ci] = new_row
                trial[ci, ci] = h + 1
                cand = objective(trial)
                if cand > current:
                    signs[ci, k] = -signs[ci, k]
                    dist = trial
                    current = cand
                    improved = True
        if not improved:
            break
    return signs


def random_maxmin_centers(
    num_classes: int,
    h: int,
    iterations: int = 16,
    seed: int = 0,
) -> CenterSet:
    """Best-of-N random center draws, each refined by greedy bit flips.

    Deterministic given the seed: restart r uses the r-th spawned child
    stream, and the best (objective, lowest restart index) wins, so results
    never get worse when iterations grow.
    """
    if num_classes < 1:
        raise InvalidInputError("need at least one class")
    if h < 1:
        raise InvalidInputError("bit length must be >= 1")
    if iterations < 1:
        raise InvalidInputError("need at least one restart")
    if h < 63 and num_classes > (1 << h):
        raise InfeasibleError(f"cannot place {num_classes} distinct codes in {h} bits")

    children = np.random.SeedSequence(seed).spawn(iterations)
    best = None
    for restart, child in enumerate(children):
        rng = np.random.default_rng(child)
        seen: set[bytes] = set()
        rows = []
        while len(rows) < num_classes:
            row = rng.choice(np.array([-1, 1], dtype=np.int8), size=h)
            key = row.tobytes()
            if key not in seen:
                seen.add(key)
                rows.append(row)
        signs = _climb(np.array(rows, dtype=np.int8))
        dist = (h - signs.astype(np.int32) @ signs.astype(np.int32).T) // 2
        np.fill_diagonal(dist, h + 1)
        score = (int(dist.min()), -int((dist == dist.min()).sum()))
        if best is None or score > best[0]:
            best = (score, restart, signs)

    centers = tuple(pack_sign_matrix(best[2]))
    return CenterSet(
        centers=centers,
        min_pairwise=_brute_force_min(centers),
        method="random-maxmin",
    )
