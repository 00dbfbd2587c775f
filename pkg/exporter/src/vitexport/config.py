"""Export configuration and the geo sidecar format.

The sidecar is a CSV with header ``id,lat,lon`` or ``id,frame``; ids must
cover every image that gets exported (matched on the filename stem).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from vitexport.model import PATCH_SIZE


@dataclass(frozen=True)
class ExportConfig:
    model: str
    image_dir: str
    geo_sidecar: str | None = None
    layer_offset: int = 1  # 1 = penultimate layer
    score_threshold: float = 0.0  # store every patch by default
    image_size: int = 504

    def __post_init__(self):
        if self.layer_offset < 1:
            raise ValueError("layer offset must be >= 1")
        if self.score_threshold < 0:
            raise ValueError("score threshold must be >= 0")
        if self.image_size % PATCH_SIZE != 0:
            raise ValueError(f"image size must be a multiple of {PATCH_SIZE}")


def load_geo_sidecar(path) -> dict[str, tuple]:
    """Map image id to a geo tuple: ('latlon', lat, lon) or ('frame', n)."""
    tags: dict[str, tuple] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        cols = set(reader.fieldnames or [])
        if {"id", "lat", "lon"} <= cols:
            for row in reader:
                tags[row["id"]] = ("latlon", float(row["lat"]), float(row["lon"]))
        elif {"id", "frame"} <= cols:
            for row in reader:
                tags[row["id"]] = ("frame", int(row["frame"]))
        else:
            raise ValueError(
                f"sidecar header must be id,lat,lon or id,frame; got {sorted(cols)}"
            )
    return tags
