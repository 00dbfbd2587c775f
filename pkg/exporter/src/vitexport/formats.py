"""Writers for the .efvp feature container and the EFMT raw-matrix framing.

Implemented against the published byte layout, independently of the
retrieval engine's own serializer: files written here must parse bit-exactly
in any conforming reader.

Container (little-endian): magic "EFVP", version u32 = 1, d_g u32, d_l u32,
record_count u64, geo_kind u32 (0 none / 1 lat-lon / 2 frame); per record:
id_len u32 + UTF-8 id, geo payload (2xf64 | i64 | empty), global f32*d_g,
local_count u32, then per local: score f32 + descriptor f32*d_l.

Matrix framing: magic "EFMT", version u32 = 1, rows u64, cols u64, f32
row-major data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

GEO_NONE = 0
GEO_LATLON = 1
GEO_FRAME = 2


@dataclass
class ExportRecord:
    image_id: str
    geo: tuple  # ("latlon", lat, lon) | ("frame", n) | ("none",)
    global_descriptor: np.ndarray
    local_scores: np.ndarray
    local_descriptors: np.ndarray  # (n_locals, d_l)


def geo_kind_code(records: list[ExportRecord]) -> int:
    kinds = {r.geo[0] for r in records}
    if not kinds:
        return GEO_NONE
    if len(kinds) > 1:
        raise ValueError(f"mixed geo kinds in one export: {sorted(kinds)}")
    return {"none": GEO_NONE, "latlon": GEO_LATLON, "frame": GEO_FRAME}[kinds.pop()]


def write_container(path, d_g: int, d_l: int, records: list[ExportRecord]) -> int:
    kind = geo_kind_code(records)
    with open(path, "wb") as f:
        total = f.write(struct.pack("<4sIIIQI", b"EFVP", 1, d_g, d_l, len(records), kind))
        for rec in records:
            raw_id = rec.image_id.encode("utf-8")
            parts = [struct.pack("<I", len(raw_id)), raw_id]
            if kind == GEO_LATLON:
                parts.append(struct.pack("<dd", rec.geo[1], rec.geo[2]))
            elif kind == GEO_FRAME:
                parts.append(struct.pack("<q", rec.geo[1]))
            parts.append(np.ascontiguousarray(rec.global_descriptor, dtype="<f4").tobytes())
            parts.append(struct.pack("<I", len(rec.local_scores)))
            for score, desc in zip(rec.local_scores, rec.local_descriptors):
                parts.append(struct.pack("<f", float(score)))
                parts.append(np.ascontiguousarray(desc, dtype="<f4").tobytes())
            total += f.write(b"".join(parts))
    return total


def write_matrix(path, matrix: np.ndarray) -> int:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError(f"expected a vector or matrix, got shape {matrix.shape}")
    with open(path, "wb") as f:
        total = f.write(struct.pack("<4sIQQ", b"EFMT", 1, m.shape[0], m.shape[1]))
        total += f.write(m.tobytes())
    return total
