"""Second-stage re-ranking by thresholded mutual nearest neighbors.

Two descriptor sets are matched by keeping exactly the pairs that are
each other's nearest neighbor and whose similarity strictly exceeds the
match threshold; candidates are then reordered by their pair counts.
No geometric verification is involved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from placerec.ranking import RankedList
from placerec.store import LocalFeature


class MatchPair(NamedTuple):
    query_idx: int
    cand_idx: int
    similarity: float


class RerankEntry(NamedTuple):
    gallery_index: int
    match_count: int
    first_stage_rank: int


@dataclass(frozen=True)
class RerankResult:
    """Candidates reordered by match count; ties keep first-stage order."""

    order: list[RerankEntry]
    pairs: dict[int, list[MatchPair]] | None = None  # keyed by gallery index

    def indices(self) -> list[int]:
        return [e.gallery_index for e in self.order]


def _descriptor_matrix(features: Sequence[LocalFeature]) -> np.ndarray:
    return np.stack([f.descriptor for f in features]).astype(np.float64)


def nearest(descriptor: np.ndarray, pool: np.ndarray) -> tuple[int, float]:
    """Index and similarity of the pool row with the largest dot product.

    Ties break toward the lowest index. The pool is an (n, d) matrix of
    unit rows; similarity comes back as float32.
    """
    pool = np.asarray(pool)
    if pool.ndim != 2 or pool.shape[0] == 0:
        raise ValueError("pool must be a non-empty (n, d) matrix")
    descriptor = np.asarray(descriptor)
    if descriptor.shape != (pool.shape[1],):
        raise ValueError(
            f"descriptor length {descriptor.shape} does not match pool width {pool.shape[1]}"
        )
    sims = pool.astype(np.float64) @ descriptor.astype(np.float64)
    idx = int(np.argmax(sims))  # first occurrence wins ties
    return idx, float(np.float32(sims[idx]))


def mutual_nn_pairs(
    a: Sequence[LocalFeature], b: Sequence[LocalFeature], threshold: float
) -> list[MatchPair]:
    """Mutual-nearest-neighbor pairs with similarity strictly above *threshold*.

    Pair (i, j) survives iff j is i's nearest neighbor in b, i is j's
    nearest neighbor in a, and a_i . b_j > threshold. Output is ordered by
    ascending query index; each index appears in at most one pair.
    """
    if not a or not b:
        return []
    ma = _descriptor_matrix(a)
    mb = _descriptor_matrix(b)
    if ma.shape[1] != mb.shape[1]:
        raise ValueError(
            f"descriptor widths differ: {ma.shape[1]} vs {mb.shape[1]}"
        )
    sim = ma @ mb.T
    nn_ab = np.argmax(sim, axis=1)  # first-max index per row
    nn_ba = np.argmax(sim, axis=0)  # first-max index per column

    pairs: list[MatchPair] = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] == i and sim[i, j] > threshold:
            pairs.append(MatchPair(int(i), int(j), float(np.float32(sim[i, j]))))
    return pairs


def rerank_candidates(
    query_locals: Sequence[LocalFeature],
    candidates: Sequence[tuple[int, Sequence[LocalFeature]]],
    threshold: float,
    first_stage: RankedList,
    keep_pairs: bool = False,
) -> RerankResult:
    """Reorder first-stage candidates by mutual-NN count, descending.

    ``candidates`` must mirror the first-stage entries (same gallery
    indices, same order). Equal counts keep their first-stage relative
    order, so a round of all-zero counts reproduces the input order.
    Candidates with no local features count 0.
    """
    if len(candidates) != len(first_stage):
        raise ValueError(
            f"{len(candidates)} candidates do not match {len(first_stage)} first-stage entries"
        )
    for (gi, _), fi in zip(candidates, first_stage.indices):
        if gi != int(fi):
            raise ValueError(
                f"candidate index {gi} does not match first-stage index {int(fi)}"
            )

    counted: list[RerankEntry] = []
    all_pairs: dict[int, list[MatchPair]] = {}
    for rank_pos, (gallery_index, cand_locals) in enumerate(candidates):
        pairs = mutual_nn_pairs(query_locals, cand_locals, threshold)
        counted.append(RerankEntry(gallery_index, len(pairs), rank_pos))
        if keep_pairs:
            all_pairs[gallery_index] = pairs

    # Stable sort: equal counts preserve first-stage order.
    order = sorted(counted, key=lambda e: -e.match_count)
    return RerankResult(order=order, pairs=all_pairs if keep_pairs else None)
