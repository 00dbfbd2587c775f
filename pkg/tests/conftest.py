import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from placerec.store import FeatureSet, GeoTag, ImageRecord, LocalFeature
from placerec.synth import SynthConfig, generate

GOLDEN_DIR = Path(__file__).parent / "golden"

# The documented reference configuration: every golden value is frozen
# against this exact dataset.
REFERENCE_CONFIG = SynthConfig(
    seed=42,
    n_places=200,
    gallery_per_place=5,
    d_g=64,
    d_l=32,
    locals_min=10,
    locals_max=20,
    global_noise=0.9,
    local_noise=0.1,
    distractor_fraction=0.3,
    geo_spacing_m=200.0,
)


def unit(v: np.ndarray) -> np.ndarray:
    return (np.asarray(v, dtype=np.float64) / np.linalg.norm(v)).astype(np.float32)


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    m = rng.standard_normal((n, d))
    return (m / np.linalg.norm(m, axis=1, keepdims=True)).astype(np.float32)


def make_record(rec_id: str, global_desc, geo: GeoTag | None = None, locals_=None) -> ImageRecord:
    return ImageRecord(
        id=rec_id,
        geo=geo if geo is not None else GeoTag.none(),
        global_descriptor=np.asarray(global_desc, dtype=np.float32),
        locals=list(locals_ or []),
    )


def make_local(score: float, descriptor) -> LocalFeature:
    return LocalFeature(score=score, descriptor=np.asarray(descriptor, dtype=np.float32))


def random_feature_set(
    rng: np.random.Generator,
    n: int,
    d_g: int = 8,
    d_l: int = 4,
    locals_range: tuple[int, int] = (0, 3),
    geo: str = "none",
) -> FeatureSet:
    records = []
    for i in range(n):
        lo, hi = locals_range
        n_loc = int(rng.integers(lo, hi + 1))
        locs = [
            make_local(float(rng.uniform(0.05, 1.0)), unit(rng.standard_normal(d_l)))
            for _ in range(n_loc)
        ]
        if geo == "latlon":
            tag = GeoTag.latlon(float(rng.uniform(-80, 80)), float(rng.uniform(-170, 170)))
        elif geo == "frame":
            tag = GeoTag.frame_index(int(rng.integers(0, 10_000)))
        else:
            tag = GeoTag.none()
        records.append(make_record(f"rec{i:05d}", unit(rng.standard_normal(d_g)), tag, locs))
    return FeatureSet(d_g=d_g, d_l=d_l, records=records)


@pytest.fixture(scope="session")
def reference_data():
    """The reference gallery/queries/truth triple (seed 42)."""
    return generate(REFERENCE_CONFIG)
