"""Feature export: images through a backbone into an STTF file."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .backbones import get_backbone
from .manifest import ExtractionManifest
from .sttf import write_sttf

log = logging.getLogger(__name__)


def load_crop(path, resize: int, crop: int) -> np.ndarray:
    """Square-resize then center-crop, as an HxWx3 uint8 array."""
    with Image.open(path) as img:
        img = img.convert("RGB").resize((resize, resize), Image.BILINEAR)
        lo = (resize - crop) // 2
        img = img.crop((lo, lo, lo + crop, lo + crop))
        return np.asarray(img)


def export_features(manifest: ExtractionManifest) -> Path:
    """Write one STTF record per readable image, in image_id order.

    Unreadable images are skipped with a logged id; zero successes is a
    failure. Extraction is deterministic (center crop, no augmentation),
    so re-running a manifest reproduces the file byte for byte.
    """
    backbone = get_backbone(manifest.backbone)
    records: dict[int, np.ndarray] = {}
    for entry in sorted(manifest.images, key=lambda e: e["image_id"]):
        image_id = entry["image_id"]
        try:
            pixels = load_crop(entry["path"], manifest.resize, manifest.crop)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %d (%s): %s",
                        image_id, entry["path"], exc)
            continue
        if manifest.mode == "regions":
            records[image_id] = backbone.region_features(pixels)
        else:
            records[image_id] = backbone.global_features(pixels)
    if not records:
        raise RuntimeError("no image in the manifest could be read")
    out = Path(manifest.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sttf(records, manifest.regions, manifest.dim, out)
    log.info("wrote %d records (%d x %d) to %s", len(records),
             manifest.regions, manifest.dim, out)
    return out
