"""Input validation helpers shared by the pipeline, CLI and server."""

from __future__ import annotations

import numpy as np

from placerec.store import LocalFeature


def as_descriptor(values, length: int, name: str = "descriptor") -> np.ndarray:
    """Coerce to a finite float32 vector of the given length."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 1 or arr.shape[0] != length:
        raise ValueError(f"{name} must be a vector of length {length}, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_local_features(payload, d_l: int) -> list[LocalFeature]:
    """Coerce a list of {score, descriptor} mappings into LocalFeatures."""
    features: list[LocalFeature] = []
    for i, item in enumerate(payload or []):
        if isinstance(item, LocalFeature):
            desc = as_descriptor(item.descriptor, d_l, f"locals[{i}].descriptor")
            features.append(LocalFeature(score=float(item.score), descriptor=desc))
            continue
        desc = as_descriptor(item["descriptor"], d_l, f"locals[{i}].descriptor")
        features.append(LocalFeature(score=float(item["score"]), descriptor=desc))
    return features


def filter_by_score(features: list[LocalFeature], threshold: float) -> list[LocalFeature]:
    """Keep features whose stored score strictly exceeds the threshold."""
    return [f for f in features if f.score > threshold]
