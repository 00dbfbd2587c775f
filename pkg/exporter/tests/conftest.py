import csv

import numpy as np
import pytest
from PIL import Image

TOY_MODEL = "toy:d48-l3-h4"
TOY_MODEL_REGISTERS = "toy:d48-l3-h4-r4"
IMAGE_SIZE = 56  # 4x4 grid of 14px patches keeps tests quick
N_IMAGES = 12


def write_test_image(path, seed: int, size: int = IMAGE_SIZE) -> None:
    """A deterministic image with enough structure to vary attention."""
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    x0, y0 = rng.integers(0, size // 2, size=2)
    img[y0 : y0 + size // 3, x0 : x0 + size // 3] = rng.integers(0, 256, size=3)
    Image.fromarray(img).save(path)


@pytest.fixture(scope="session")
def image_corpus(tmp_path_factory):
    """N_IMAGES deterministic PNGs plus lat/lon and frame sidecars."""
    root = tmp_path_factory.mktemp("images")
    ids = []
    for i in range(N_IMAGES):
        name = f"img{i:03d}"
        write_test_image(root / f"{name}.png", seed=100 + i)
        ids.append(name)

    latlon = root / "geo_latlon.csv"
    with open(latlon, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "lat", "lon"])
        for i, name in enumerate(ids):
            writer.writerow([name, 47.0 + i * 0.001, 8.0 + i * 0.001])

    frames = root / "geo_frames.csv"
    with open(frames, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "frame"])
        for i, name in enumerate(ids):
            writer.writerow([name, i * 3])

    return root, ids, latlon, frames
