"""Two-stage visual place recognition over a binary feature container.

Stage one ranks a gallery by cosine similarity of global descriptors;
stage two re-ranks the top candidates by counting thresholded mutual
nearest neighbors between attention-selected local descriptors.
"""

__version__ = "0.1.0"

from placerec.store import (
    FeatureSet,
    GeoTag,
    ImageRecord,
    LocalFeature,
    read_feature_set,
    validate,
    write_feature_set,
)
from placerec.pipeline import PcaReducer, PlaceRetriever

__all__ = [
    "FeatureSet",
    "GeoTag",
    "ImageRecord",
    "LocalFeature",
    "PcaReducer",
    "PlaceRetriever",
    "read_feature_set",
    "validate",
    "write_feature_set",
    "__version__",
]
