"""COCO-style annotation JSON -> caption JSONL plus split manifests."""

from __future__ import annotations

import json
import logging
from pathlib import Path

log = logging.getLogger(__name__)


def convert_annotations(dataset_json, out_dir, splits: dict[str, list[int]]
                        | None = None) -> dict[str, Path]:
    """Write per-split captions_<name>.jsonl and <name>_images.txt files.

    ``dataset_json`` follows the COCO captions layout: an "images" list
    (ids) and an "annotations" list of {"image_id", "caption"}. Without a
    split table every image lands in one "all" split. Malformed or empty
    annotation entries are logged and skipped.
    """
    with open(dataset_json, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "annotations" not in doc:
        raise ValueError(f"{dataset_json}: no 'annotations' section")

    known_ids = {int(img["id"]) for img in doc.get("images", [])
                 if isinstance(img, dict) and "id" in img}
    captions: dict[int, list[str]] = {}
    skipped = 0
    for entry in doc["annotations"]:
        try:
            image_id = int(entry["image_id"])
            caption = str(entry["caption"]).strip()
        except (KeyError, TypeError, ValueError):
            log.warning("skipping malformed annotation entry %r", entry)
            skipped += 1
            continue
        if not caption:
            log.warning("skipping empty caption for image %d", image_id)
            skipped += 1
            continue
        if known_ids and image_id not in known_ids:
            log.warning("skipping caption for unlisted image %d", image_id)
            skipped += 1
            continue
        captions.setdefault(image_id, []).append(caption)
    if not captions:
        raise ValueError(f"{dataset_json}: no usable captions")

    if splits is None:
        splits = {"all": sorted(captions)}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    for name in sorted(splits):
        ids = [i for i in sorted(set(int(x) for x in splits[name]))
               if i in captions]
        if not ids:
            log.warning("split %r matches no captioned images", name)
            continue
        cap_path = out / f"captions_{name}.jsonl"
        with open(cap_path, "w", encoding="utf-8") as fh:
            for image_id in ids:
                for caption in captions[image_id]:
                    fh.write(json.dumps({"image_id": image_id,
                                         "caption": caption}) + "\n")
        list_path = out / f"{name}_images.txt"
        list_path.write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
        written[name] = cap_path
        log.info("split %s: %d images, %d captions", name, len(ids),
                 sum(len(captions[i]) for i in ids))
    if skipped:
        log.info("skipped %d malformed/empty annotation entries", skipped)
    return written


def load_split_table(path) -> dict[str, list[int]]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or not all(
            isinstance(v, list) for v in doc.values()):
        raise ValueError(f"{path}: split file must map names to id lists")
    return {str(k): [int(i) for i in v] for k, v in doc.items()}
