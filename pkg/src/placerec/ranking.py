"""First-stage retrieval: exact cosine top-k search, plus PCA reduction.

Search is exact by design: galleries at desk scale fit in memory and
exactness keeps every downstream result deterministic. Similarities are
float64-accumulated dot products rounded to float32; ties break toward
the lower gallery index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from placerec.store import FeatureSet


@dataclass(frozen=True)
class RankedList:
    """Gallery indices with similarities, ordered best-first."""

    indices: np.ndarray  # int64
    similarities: np.ndarray  # float32, non-increasing

    def __len__(self) -> int:
        return len(self.indices)

    def entries(self) -> list[tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.indices, self.similarities)]


def _similarities(gallery_matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    sims64 = gallery_matrix.astype(np.float64) @ query.astype(np.float64)
    return sims64.astype(np.float32)


def rank(query_global: np.ndarray, gallery: FeatureSet, k: int) -> RankedList:
    """Top-k gallery records by dot product against a unit query descriptor.

    Returns min(k, len(gallery)) entries sorted by similarity descending,
    equal similarities ordered by ascending gallery index.
    """
    query_global = np.asarray(query_global)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(gallery) == 0:
        raise ValueError("cannot rank against an empty gallery")
    if query_global.shape != (gallery.d_g,):
        raise ValueError(
            f"query length {query_global.shape} does not match gallery d_g={gallery.d_g}"
        )
    sims = _similarities(gallery.globals_matrix(), query_global)
    # Stable sort on negated scores: equal values keep ascending-index order.
    order = np.argsort(-sims, kind="stable")[: min(k, len(sims))]
    return RankedList(indices=order.astype(np.int64), similarities=sims[order])


@dataclass(frozen=True)
class PcaProjection:
    """Mean plus orthonormal principal directions (d_out, d_g)."""

    mean: np.ndarray  # float32, length d_g
    components: np.ndarray  # float32, rows orthonormal

    @property
    def d_out(self) -> int:
        return self.components.shape[0]


def fit_pca(gallery: FeatureSet, d_out: int) -> PcaProjection:
    """Top-d_out principal directions of the gallery's global descriptors.

    Deterministic: components come out in descending eigenvalue order and
    each is sign-fixed so its first nonzero coefficient is positive.
    """
    return fit_pca_matrix(gallery.globals_matrix(), d_out)


def fit_pca_matrix(data: np.ndarray, d_out: int) -> PcaProjection:
    """PCA of the rows of an (n, d) matrix; see fit_pca."""
    n, d = data.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 rows")
    if not 1 <= d_out <= min(d, n):
        raise ValueError(f"d_out={d_out} not in [1, min(d, n)={min(d, n)}]")

    x = data.astype(np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    if not np.any(np.abs(centered) > 1e-12):
        raise ValueError("degenerate gallery: zero variance in global descriptors")

    # SVD of the centered data; right singular vectors are the directions.
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:d_out]
    for row in components:
        nz = np.nonzero(row)[0]
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return PcaProjection(
        mean=mean.astype(np.float32), components=components.astype(np.float32)
    )


def project(p: PcaProjection, v: np.ndarray) -> np.ndarray:
    """Center, project and L2-normalize one descriptor; float32 output."""
    v = np.asarray(v)
    if v.shape != p.mean.shape:
        raise ValueError(f"vector length {v.shape} does not match d_g={p.mean.shape[0]}")
    y = p.components.astype(np.float64) @ (v.astype(np.float64) - p.mean.astype(np.float64))
    norm = np.linalg.norm(y)
    if norm == 0.0:
        raise ValueError("projection collapsed the vector to zero")
    return (y / norm).astype(np.float32)
