"""Standalone STTF writer: the binary interface consumed by the stt engine.

Little-endian: magic "STTF", version u32=1, record_count u32, regions u32,
dim u32, then record_count x [image_id u64, regions*dim float32]. Records
are written in ascending image_id order so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"STTF"
VERSION = 1


def write_sttf(records: dict[int, np.ndarray], regions: int, dim: int,
               path) -> None:
    for image_id, values in records.items():
        if values.shape != (regions, dim):
            raise ValueError(f"record {image_id} has shape {values.shape}, "
                             f"manifest says ({regions}, {dim})")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", VERSION, len(records), regions, dim))
        for image_id in sorted(records):
            fh.write(struct.pack("<Q", image_id))
            fh.write(np.ascontiguousarray(records[image_id], dtype="<f4").tobytes())
