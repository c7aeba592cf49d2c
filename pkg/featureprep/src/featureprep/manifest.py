"""Extraction manifests: what to extract, with what, into which file."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

FEATURE_DIM = 2048
REGION_COUNT = 36


@dataclass
class ExtractionManifest:
    dataset: str
    split: str
    images: list[dict]            # [{"image_id": int, "path": str}, ...]
    backbone: str = "resnet152"   # "resnet152" | "toy"
    mode: str = "global"          # "global" (pooled) | "regions" (36 x dim)
    output: Path = Path("features.sttf")
    resize: int = 256             # square resize before cropping
    crop: int = 224               # center crop fed to the backbone

    def __post_init__(self):
        if self.mode not in ("global", "regions"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.backbone not in ("resnet152", "toy"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if not self.images:
            raise ValueError("manifest lists no images")
        for entry in self.images:
            if "image_id" not in entry or "path" not in entry:
                raise ValueError(f"bad image entry {entry!r}")
        if self.crop > self.resize:
            raise ValueError("crop size exceeds resize size")

    @property
    def regions(self) -> int:
        return REGION_COUNT if self.mode == "regions" else 1

    @property
    def dim(self) -> int:
        return FEATURE_DIM

    @staticmethod
    def load(path) -> "ExtractionManifest":
        base = Path(path).parent
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        known = {"dataset", "split", "images", "backbone", "mode", "output",
                 "resize", "crop"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"{path}: unknown manifest fields {sorted(unknown)}")
        missing = {"dataset", "split", "images"} - set(doc)
        if missing:
            raise ValueError(f"{path}: missing manifest fields {sorted(missing)}")
        doc.setdefault("output", "features.sttf")
        doc["output"] = base / doc["output"]
        images = []
        for entry in doc["images"]:
            images.append({"image_id": int(entry["image_id"]),
                           "path": str(base / entry["path"])})
        doc["images"] = images
        return ExtractionManifest(**doc)
