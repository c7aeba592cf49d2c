import json

import numpy as np
import pytest
from PIL import Image


@pytest.fixture(scope="session")
def image_fixture(tmp_path_factory):
    """Ten seeded-noise PNGs plus a matching COCO-style annotation file."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(99)
    entries = []
    for image_id in range(1, 11):
        pixels = rng.integers(0, 256, size=(48, 64, 3), dtype=np.uint8)
        path = root / f"{image_id:06d}.png"
        Image.fromarray(pixels).save(path)
        entries.append({"image_id": image_id, "path": str(path)})

    annotations = {
        "images": [{"id": e["image_id"], "file_name": f"{e['image_id']:06d}.png"}
                   for e in entries],
        "annotations": [
            {"image_id": e["image_id"],
             "caption": f"a scene number {e['image_id']} with noise"}
            for e in entries
        ] + [
            {"image_id": e["image_id"],
             "caption": f"noisy picture {e['image_id']} of nothing"}
            for e in entries
        ],
    }
    ann_path = root / "annotations.json"
    ann_path.write_text(json.dumps(annotations))
    return {"root": root, "entries": entries, "annotations": ann_path}
