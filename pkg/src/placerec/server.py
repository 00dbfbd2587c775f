"""HTTP query service over one immutable gallery.

The gallery loads once at startup and is shared read-only by all
requests, so identical concurrent requests get identical responses and
the response ordering for any parameter set matches the CLI's.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

import placerec
from placerec.pipeline import DEFAULT_CANDIDATES, PlaceRetriever
from placerec.store import FeatureSet, read_feature_set_file
from placerec.validation import as_local_features


class LocalFeaturePayload(BaseModel):
    score: float
    descriptor: list[float]


class QueryRequest(BaseModel):
    global_descriptor: list[float]
    locals: list[LocalFeaturePayload] | None = None
    k: int = Field(default=DEFAULT_CANDIDATES, ge=1)
    t1: float | None = None
    t2: float | None = None
    rerank: bool = True


class ResultEntry(BaseModel):
    id: str
    first_stage_similarity: float
    mnn_count: int | None = None


class Timings(BaseModel):
    rank_ms: float
    rerank_ms: float


class QueryResponse(BaseModel):
    results: list[ResultEntry]
    timings: Timings


def create_app(
    gallery_path: str | None = None, gallery: FeatureSet | None = None
) -> FastAPI:
    """Build the service; the gallery is read eagerly when a source is given."""
    app = FastAPI(title="placerec", version=placerec.__version__)
    app.state.retriever = None

    if gallery is None and gallery_path is not None:
        gallery = read_feature_set_file(gallery_path)
    if gallery is not None:
        app.state.retriever = PlaceRetriever().fit(gallery)

    def _retriever() -> PlaceRetriever:
        r = app.state.retriever
        if r is None:
            raise HTTPException(status_code=503, detail="gallery not loaded")
        return r

    @app.get("/v1/health")
    def health():
        r = _retriever()
        return {
            "status": "ok",
            "gallery_size": len(r.gallery_),
            "d_g": r.gallery_.d_g,
            "d_l": r.gallery_.d_l,
            "version": placerec.__version__,
        }

    @app.post("/v1/query", response_model=QueryResponse, response_model_exclude_none=True)
    def query(req: QueryRequest):
        r = _retriever()
        gallery = r.gallery_
        if len(req.global_descriptor) != gallery.d_g:
            raise HTTPException(
                status_code=400,
                detail=f"global_descriptor: expected length {gallery.d_g}, "
                       f"got {len(req.global_descriptor)}",
            )
        for i, lf in enumerate(req.locals or []):
            if len(lf.descriptor) != gallery.d_l:
                raise HTTPException(
                    status_code=400,
                    detail=f"locals[{i}].descriptor: expected length {gallery.d_l}, "
                           f"got {len(lf.descriptor)}",
                )

        if req.rerank:
            query_locals = as_local_features(
                [lf.model_dump() for lf in req.locals or []], gallery.d_l
            )
        else:
            query_locals = []

        stage_times: dict = {}
        result = r.retrieve_one(
            req.global_descriptor,
            query_locals,
            k=req.k,
            keypoint_threshold=req.t1,
            match_threshold=req.t2,
            rerank=req.rerank,
            timings=stage_times,
        )

        entries = []
        for pos, gid in enumerate(result.gallery_ids):
            entries.append(
                ResultEntry(
                    id=gid,
                    first_stage_similarity=result.similarities[pos],
                    mnn_count=None
                    if result.match_counts is None
                    else result.match_counts[pos],
                )
            )
        timings = Timings(
            rank_ms=stage_times.get("rank_ms", 0.0),
            rerank_ms=stage_times.get("rerank_ms", 0.0),
        )
        return QueryResponse(results=entries, timings=timings)

    return app
