"""Bridge from a ViT backbone to the .efvp feature container.

Runs images through a vision transformer, captures the token matrix and
Q/K/V projection weights at a chosen attention layer, computes the
CLS-attention score map and thresholded keypoints, and writes feature
files plus raw matrix dumps. Communicates with the retrieval engine only
through those file formats.
"""

__version__ = "0.1.0"

from vitexport.config import ExportConfig, load_geo_sidecar
from vitexport.export import export, export_matrices

__all__ = ["ExportConfig", "export", "export_matrices", "load_geo_sidecar", "__version__"]
