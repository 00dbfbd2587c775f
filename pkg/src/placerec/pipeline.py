"""Scikit-learn style estimators wrapping the two-stage retrieval pipeline.

``PlaceRetriever`` is the one object the CLI and the HTTP service share, so
a result computed through either surface is the same in-process pipeline:
global cosine ranking of the top k candidates, then (optionally) mutual-NN
re-ranking of those candidates' local features.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from placerec import matching, ranking
from placerec.attention import DEFAULT_KEYPOINT_THRESHOLD, DEFAULT_MATCH_THRESHOLD
from placerec.store import FeatureSet, ImageRecord, LocalFeature
from placerec.validation import as_descriptor, filter_by_score

THREADS_ENV = "EFFO_THREADS"
DEFAULT_CANDIDATES = 100


def worker_count() -> int:
    """Worker cap for per-query fan-out; EFFO_THREADS overrides core count."""
    env = os.environ.get(THREADS_ENV)
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1")
        return n
    return os.cpu_count() or 1


@dataclass
class QueryResult:
    """Final ordering for one query, annotated with first-stage evidence."""

    query_id: str
    gallery_indices: list[int]
    gallery_ids: list[str]
    similarities: list[float]  # first-stage similarity, in output order
    match_counts: list[int] | None  # None when re-ranking was off

    def to_record(self) -> dict:
        results = []
        for pos, gid in enumerate(self.gallery_ids):
            entry: dict = {"id": gid, "similarity": self.similarities[pos]}
            if self.match_counts is not None:
                entry["mnn_count"] = self.match_counts[pos]
            results.append(entry)
        return {"query_id": self.query_id, "results": results}


class PcaReducer(BaseEstimator, TransformerMixin):
    """PCA to ``n_components`` followed by L2 normalization per row."""

    def __init__(self, n_components: int = 128):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = self._as_matrix(X)
        proj = ranking.fit_pca_matrix(X, self.n_components)
        self.mean_ = proj.mean
        self.components_ = proj.components
        self.projection_ = proj
        return self

    def transform(self, X):
        X = self._as_matrix(X)
        return np.stack([ranking.project(self.projection_, row) for row in X])

    @staticmethod
    def _as_matrix(X) -> np.ndarray:
        if isinstance(X, FeatureSet):
            return X.globals_matrix()
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 2:
            raise ValueError(f"expected an (n, d) matrix, got shape {X.shape}")
        return X


class PlaceRetriever(BaseEstimator):
    """Two-stage place retrieval over a fitted gallery.

    Parameters
    ----------
    k : number of first-stage candidates to retrieve (and re-rank).
    keypoint_threshold : stored local features with score <= this are
        ignored on both sides of the match (the ``--t1`` knob).
    match_threshold : minimum similarity, exclusive, for a mutual-NN pair
        to count (the ``--t2`` knob).
    rerank : when False the first-stage order is returned as-is.
    n_components : optional PCA width for the global stage.
    """

    def __init__(
        self,
        k: int = DEFAULT_CANDIDATES,
        keypoint_threshold: float = DEFAULT_KEYPOINT_THRESHOLD,
        match_threshold: float = DEFAULT_MATCH_THRESHOLD,
        rerank: bool = True,
        n_components: int | None = None,
    ):
        self.k = k
        self.keypoint_threshold = keypoint_threshold
        self.match_threshold = match_threshold
        self.rerank = rerank
        self.n_components = n_components

    def fit(self, gallery: FeatureSet, y=None):
        if not isinstance(gallery, FeatureSet):
            raise TypeError("fit expects a FeatureSet gallery")
        if len(gallery) == 0:
            raise ValueError("cannot fit on an empty gallery")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        self.gallery_ = gallery
        if self.n_components is not None:
            self.reducer_ = PcaReducer(self.n_components).fit(gallery)
            self.search_set_ = _reduced_copy(gallery, self.reducer_)
        else:
            self.reducer_ = None
            self.search_set_ = gallery
        return self

    # -- retrieval --------------------------------------------------------

    def retrieve_one(
        self,
        global_descriptor: np.ndarray,
        query_locals: list[LocalFeature] | None = None,
        query_id: str = "",
        k: int | None = None,
        keypoint_threshold: float | None = None,
        match_threshold: float | None = None,
        rerank: bool | None = None,
        timings: dict | None = None,
    ) -> QueryResult:
        """Run the pipeline for a single query, with optional overrides.

        When a ``timings`` dict is passed, per-stage wall times land in its
        ``rank_ms`` and ``rerank_ms`` keys.
        """
        self._check_fitted()
        k = self.k if k is None else k
        t1 = self.keypoint_threshold if keypoint_threshold is None else keypoint_threshold
        t2 = self.match_threshold if match_threshold is None else match_threshold
        do_rerank = self.rerank if rerank is None else rerank

        started = time.perf_counter()
        query = as_descriptor(global_descriptor, self.gallery_.d_g, "global_descriptor")
        if self.reducer_ is not None:
            query = ranking.project(self.reducer_.projection_, query)
        first = ranking.rank(query, self.search_set_, k)
        if timings is not None:
            timings["rank_ms"] = (time.perf_counter() - started) * 1000.0
            timings["rerank_ms"] = 0.0

        if not do_rerank:
            return self._result(query_id, first.indices, first.similarities, None)

        started = time.perf_counter()
        filtered_query = filter_by_score(list(query_locals or []), t1)
        candidates = [
            (int(gi), filter_by_score(self.gallery_.records[int(gi)].locals, t1))
            for gi in first.indices
        ]
        reranked = matching.rerank_candidates(filtered_query, candidates, t2, first)
        if timings is not None:
            timings["rerank_ms"] = (time.perf_counter() - started) * 1000.0
        indices = [e.gallery_index for e in reranked.order]
        sims = [float(first.similarities[e.first_stage_rank]) for e in reranked.order]
        counts = [e.match_count for e in reranked.order]
        return self._result(query_id, indices, sims, counts)

    def retrieve(self, queries: FeatureSet, workers: int | None = None) -> list[QueryResult]:
        """Run the pipeline for every query record, in query order."""
        self._check_fitted()
        if queries.d_g != self.gallery_.d_g:
            raise ValueError(
                f"query d_g={queries.d_g} does not match gallery d_g={self.gallery_.d_g}"
            )

        def one(rec):
            return self.retrieve_one(
                rec.global_descriptor, rec.locals, query_id=rec.id
            )

        n_workers = worker_count() if workers is None else workers
        if n_workers <= 1 or len(queries) <= 1:
            return [one(rec) for rec in queries.records]
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            return list(pool.map(one, queries.records))

    def predict(self, queries: FeatureSet) -> np.ndarray:
        """Top-1 gallery id per query."""
        return np.array([r.gallery_ids[0] for r in self.retrieve(queries)])

    # -- internals --------------------------------------------------------

    def _result(self, query_id, indices, sims, counts) -> QueryResult:
        ids = [self.gallery_.records[int(i)].id for i in indices]
        return QueryResult(
            query_id=query_id,
            gallery_indices=[int(i) for i in indices],
            gallery_ids=ids,
            similarities=[float(s) for s in sims],
            match_counts=counts,
        )

    def _check_fitted(self):
        if not hasattr(self, "gallery_"):
            raise RuntimeError("retriever is not fitted; call fit(gallery) first")


def _reduced_copy(gallery: FeatureSet, reducer: PcaReducer) -> FeatureSet:
    """Gallery clone whose global descriptors live in the reduced space."""
    records = [
        ImageRecord(
            id=rec.id,
            geo=rec.geo,
            global_descriptor=ranking.project(reducer.projection_, rec.global_descriptor),
            locals=rec.locals,
        )
        for rec in gallery.records
    ]
    return FeatureSet(d_g=reducer.n_components, d_l=gallery.d_l, records=records)
