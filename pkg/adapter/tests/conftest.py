import csv

import numpy as np
import pytest
from PIL import Image


@pytest.fixture
def fixture_manifest(tmp_path):
    """10 generated images and 10 captions, as a manifest CSV."""
    rng = np.random.default_rng(7)
    rows = []
    for i in range(10):
        path = tmp_path / f"img{i}.png"
        pixels = rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
        Image.fromarray(pixels).save(path)
        rows.append((f"img{i}", "image", str(path)))
    for i in range(10):
        rows.append((f"cap{i}", "text", f"synthetic caption number {i} about topic {i % 3}"))
    manifest = tmp_path / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "kind", "value"])
        writer.writerows(rows)
    return manifest
