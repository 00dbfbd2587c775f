"""Localization correctness protocols and Recall@K computation.

A retrieval is correct under the radius protocol when the great-circle
distance between query and retrieved geo-tag is within the radius
(25 m by default), and under the frame protocol when the frame indices
are within the window (+-10 by default). Boundaries are inclusive by
default; the strictness flag flips both to exclusive for reproducibility
studies against toolchains that read the threshold as open.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

from placerec.store import FeatureSet, GeoKind, GeoTag, ImageRecord

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_RADIUS_M = 25.0
DEFAULT_FRAME_WINDOW = 10
DEFAULT_KS = (1, 5, 10)


@dataclass(frozen=True)
class Protocol:
    """Correctness rule: geographic radius in meters or frame-index window."""

    kind: GeoKind
    radius_m: float = DEFAULT_RADIUS_M
    frame_window: int = DEFAULT_FRAME_WINDOW
    inclusive: bool = True

    def __post_init__(self):
        if self.kind == GeoKind.LATLON and self.radius_m <= 0:
            raise ValueError("radius must be positive")
        if self.kind == GeoKind.FRAME and self.frame_window < 0:
            raise ValueError("frame window must be >= 0")
        if self.kind == GeoKind.NONE:
            raise ValueError("protocol needs a geo kind to measure against")

    @classmethod
    def radius(cls, meters: float = DEFAULT_RADIUS_M, inclusive: bool = True) -> "Protocol":
        return cls(kind=GeoKind.LATLON, radius_m=meters, inclusive=inclusive)

    @classmethod
    def frames(cls, window: int = DEFAULT_FRAME_WINDOW, inclusive: bool = True) -> "Protocol":
        return cls(kind=GeoKind.FRAME, frame_window=window, inclusive=inclusive)


def haversine_m(a: GeoTag, b: GeoTag) -> float:
    """Great-circle distance in meters on a mean-radius sphere."""
    if a.kind != GeoKind.LATLON or b.kind != GeoKind.LATLON:
        raise ValueError("haversine needs two lat/lon tags")
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    s_lat = math.sin((lat2 - lat1) / 2.0)
    s_lon = math.sin((lon2 - lon1) / 2.0)
    h = s_lat * s_lat + math.cos(lat1) * math.cos(lat2) * s_lon * s_lon
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def is_correct(query: ImageRecord, retrieved: ImageRecord, protocol: Protocol) -> bool:
    """Whether *retrieved* localizes *query* under the protocol."""
    if query.geo.kind != protocol.kind or retrieved.geo.kind != protocol.kind:
        raise ValueError(
            f"geo kinds ({query.geo.kind.name}, {retrieved.geo.kind.name}) do not "
            f"match protocol kind {protocol.kind.name}"
        )
    if protocol.kind == GeoKind.LATLON:
        d = haversine_m(query.geo, retrieved.geo)
        return d <= protocol.radius_m if protocol.inclusive else d < protocol.radius_m
    delta = abs(query.geo.frame - retrieved.geo.frame)
    return delta <= protocol.frame_window if protocol.inclusive else delta < protocol.frame_window


@dataclass
class RecallTable:
    """Recall fraction per cutoff k, over a fixed query count."""

    ks: list[int]
    values: list[float]
    query_count: int

    def rows(self) -> list[dict]:
        return [
            {"k": k, "recall": round(v, 4), "query_count": self.query_count}
            for k, v in zip(self.ks, self.values)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["k", "recall", "query_count"])
        for row in self.rows():
            writer.writerow([row["k"], f"{row['recall']:.4f}", row["query_count"]])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.rows(), indent=2) + "\n"


def recall_at_k(
    results: list[list[int]],
    queries: FeatureSet,
    gallery: FeatureSet,
    protocol: Protocol,
    ks: tuple[int, ...] = DEFAULT_KS,
) -> RecallTable:
    """Fraction of queries with a correct retrieval in their top-k.

    ``results`` holds, per query, gallery indices ordered best-first.
    ``ks`` must be ascending; recall is then non-decreasing in k.
    """
    if len(queries) == 0:
        raise ValueError("empty query set")
    if len(results) != len(queries):
        raise ValueError(f"{len(results)} result lists for {len(queries)} queries")
    if list(ks) != sorted(ks):
        raise ValueError("ks must be ascending")

    max_k = max(ks)
    hits = [0] * len(ks)
    for q_idx, retrieved in enumerate(results):
        query = queries.records[q_idx]
        first_correct = None
        for pos, g_idx in enumerate(retrieved[:max_k]):
            if not 0 <= g_idx < len(gallery):
                raise ValueError(f"result index {g_idx} outside gallery of {len(gallery)}")
            if is_correct(query, gallery.records[g_idx], protocol):
                first_correct = pos + 1
                break
        if first_correct is not None:
            for ki, k in enumerate(ks):
                if first_correct <= k:
                    hits[ki] += 1
    n = len(queries)
    return RecallTable(ks=list(ks), values=[h / n for h in hits], query_count=n)
