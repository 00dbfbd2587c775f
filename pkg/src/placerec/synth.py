"""Deterministic synthetic galleries and query sets with known ground truth.

Every place gets a latent global direction and a bank of latent local
directions; images of the place are noisy copies of those latents, and a
configurable fraction of each query's locals are "distractors" drawn from
other places' banks (stand-ins for transient objects that appear in more
than one location). Geo-tags put all images of a place within 5 m of its
center, with centers spaced far enough apart that the radius protocol is
unambiguous.

Randomness comes from the Philox4x64-10 counter-based generator so output
is reproducible bit-for-bit from the config alone. Stream layout: key word
0 is the config seed, key word 1 selects the substream - 0 draws the place
latents (per place: global direction, then ``locals_max`` local
directions), and 1+ordinal draws one image each (gallery images first, in
record order, then queries). Per-image draw order: global noise, local
count, then per local slot: distractor source (queries only), noise,
score, and finally the geo offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from placerec.store import FeatureSet, GeoTag, ImageRecord, LocalFeature

_M_PER_DEG = 6_371_000.0 * np.pi / 180.0
_PLACE_JITTER_M = 5.0


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    n_places: int = 200
    gallery_per_place: int = 5
    d_g: int = 64
    d_l: int = 32
    locals_min: int = 10
    locals_max: int = 20
    global_noise: float = 0.9
    local_noise: float = 0.1
    distractor_fraction: float = 0.3
    geo_spacing_m: float = 200.0

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be a non-negative 64-bit integer")
        if self.n_places < 1 or self.gallery_per_place < 1:
            raise ValueError("need at least one place and one gallery image per place")
        if self.d_g < 1 or self.d_l < 1:
            raise ValueError("descriptor dimensions must be positive")
        if not 1 <= self.locals_min <= self.locals_max:
            raise ValueError("locals range must satisfy 1 <= min <= max")
        if self.global_noise < 0 or self.local_noise < 0:
            raise ValueError("noise levels must be >= 0")
        if not 0.0 <= self.distractor_fraction < 1.0:
            raise ValueError("distractor fraction must be in [0, 1)")
        if self.distractor_fraction > 0 and self.n_places < 2:
            raise ValueError("distractors need a second place to draw from")
        # Twice the 25 m correctness radius, so truth is protocol-unambiguous.
        if self.geo_spacing_m <= 50.0:
            raise ValueError("geo spacing must exceed 50 m")

    @property
    def n_gallery(self) -> int:
        return self.n_places * self.gallery_per_place

    @property
    def n_queries(self) -> int:
        return self.n_places


def _stream(seed: int, stream_id: int) -> np.random.Generator:
    key = np.array([seed, stream_id], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _perturb(latent: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Noisy unit copy of a latent direction.

    Isotropic Gaussian in the tangent space at the latent, renormalized.
    Per-component std is sigma * sqrt(2/d), so the noise norm concentrates
    at sigma * sqrt(2): the knob sweeps from exact copies (0) through
    degraded-but-recoverable ranking (~1) to indistinguishable (~2.5+).
    """
    d = latent.shape[0]
    noise = rng.standard_normal(d) * (sigma * np.sqrt(2.0 / d))
    noise -= np.dot(noise, latent) * latent
    return _unit(latent + noise).astype(np.float32)


@dataclass(frozen=True)
class _Latents:
    globals_: np.ndarray  # (n_places, d_g) unit rows
    banks: np.ndarray  # (n_places, locals_max, d_l) unit rows


def _draw_latents(cfg: SynthConfig) -> _Latents:
    rng = _stream(cfg.seed, 0)
    globals_ = np.empty((cfg.n_places, cfg.d_g))
    banks = np.empty((cfg.n_places, cfg.locals_max, cfg.d_l))
    for p in range(cfg.n_places):
        globals_[p] = _unit(rng.standard_normal(cfg.d_g))
        for j in range(cfg.locals_max):
            banks[p, j] = _unit(rng.standard_normal(cfg.d_l))
    return _Latents(globals_=globals_, banks=banks)


def _place_geo(cfg: SynthConfig, place: int, rng: np.random.Generator) -> GeoTag:
    center_lon = place * cfg.geo_spacing_m / _M_PER_DEG
    r = rng.uniform(0.0, _PLACE_JITTER_M)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    lat = r * np.sin(theta) / _M_PER_DEG
    lon = center_lon + r * np.cos(theta) / _M_PER_DEG
    return GeoTag.latlon(lat, lon)


def _make_image(
    cfg: SynthConfig, latents: _Latents, place: int, ordinal: int, is_query: bool
) -> tuple[np.ndarray, list[LocalFeature], GeoTag]:
    rng = _stream(cfg.seed, 1 + ordinal)
    global_desc = _perturb(latents.globals_[place], cfg.global_noise, rng)
    n = int(rng.integers(cfg.locals_min, cfg.locals_max + 1))
    n_distractors = int(round(cfg.distractor_fraction * n)) if is_query else 0

    features: list[LocalFeature] = []
    for slot in range(n):
        if slot >= n - n_distractors:
            other = int(rng.integers(0, cfg.n_places - 1))
            src_place = other + 1 if other >= place else other
            bank_idx = int(rng.integers(0, cfg.locals_max))
        else:
            src_place, bank_idx = place, slot
        desc = _perturb(latents.banks[src_place, bank_idx], cfg.local_noise, rng)
        score = float(rng.uniform(0.001, 1.0))
        features.append(LocalFeature(score=score, descriptor=desc))
    geo = _place_geo(cfg, place, rng)
    return global_desc, features, geo


def generate(cfg: SynthConfig) -> tuple[FeatureSet, FeatureSet, dict[str, int]]:
    """Build (gallery, queries, truth) where truth maps query id to place id."""
    latents = _draw_latents(cfg)

    gallery_records: list[ImageRecord] = []
    for place in range(cfg.n_places):
        for copy in range(cfg.gallery_per_place):
            ordinal = place * cfg.gallery_per_place + copy
            g, locs, geo = _make_image(cfg, latents, place, ordinal, is_query=False)
            gallery_records.append(
                ImageRecord(id=f"g{place:04d}_{copy}", geo=geo, global_descriptor=g, locals=locs)
            )

    query_records: list[ImageRecord] = []
    truth: dict[str, int] = {}
    for place in range(cfg.n_places):
        ordinal = cfg.n_gallery + place
        g, locs, geo = _make_image(cfg, latents, place, ordinal, is_query=True)
        qid = f"q{place:04d}"
        query_records.append(
            ImageRecord(id=qid, geo=geo, global_descriptor=g, locals=locs)
        )
        truth[qid] = place

    gallery = FeatureSet(d_g=cfg.d_g, d_l=cfg.d_l, records=gallery_records)
    queries = FeatureSet(d_g=cfg.d_g, d_l=cfg.d_l, records=query_records)
    return gallery, queries, truth
