"""Synthetic desk-scale fixtures: random image features plus template captions.

Each image gets a distinctive sentence built from per-image word choices,
repeated as its caption set, so a small model can fully memorize the
mapping. ``python -m stt.toydata OUT_DIR`` writes features.sttf and
captions.jsonl ready for the CLI.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from .data import FeatureStore

COLORS = ("red", "blue", "green", "black", "white", "orange", "purple", "gray")
ANIMALS = ("dog", "cat", "bird", "horse", "fish", "sheep", "fox", "owl")
VERBS = ("runs", "sleeps", "jumps", "waits", "stands", "swims", "plays", "hides")
PLACES = ("park", "river", "house", "field", "street", "beach", "forest", "yard")


def toy_caption(index: int) -> str:
    return (f"the {COLORS[index % 8]} {ANIMALS[index % 8]} "
            f"{VERBS[(index // 8) % 8]} near the {PLACES[(index * 3) % 8]}")


def make_toy_dataset(num_images: int = 8, captions_per_image: int = 5,
                     feature_dim: int = 64, regions: int = 1,
                     seed: int = 0) -> tuple[FeatureStore, dict[int, list[str]]]:
    """Seeded random features and template captions, ids 1..num_images."""
    rng = np.random.default_rng(seed)
    store = FeatureStore(regions=regions, dim=feature_dim)
    captions: dict[int, list[str]] = {}
    for i in range(num_images):
        image_id = i + 1
        store.add(image_id, rng.standard_normal((regions, feature_dim)))
        captions[image_id] = [toy_caption(i)] * captions_per_image
    return store, captions


def write_toy_dataset(out_dir, **kwargs) -> tuple[Path, Path]:
    from .data import write_feature_file

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store, captions = make_toy_dataset(**kwargs)
    features_path = out / "features.sttf"
    captions_path = out / "captions.jsonl"
    write_feature_file(store, features_path)
    with open(captions_path, "w", encoding="utf-8") as fh:
        for image_id in sorted(captions):
            for cap in captions[image_id]:
                fh.write(json.dumps({"image_id": image_id, "caption": cap}) + "\n")
    return features_path, captions_path


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else "toy_data"
    paths = write_toy_dataset(target)
    print("\n".join(str(p) for p in paths))
