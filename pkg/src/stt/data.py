"""Feature files, caption corpora, vocabulary, paraphrase pairs, batching.

File formats owned here:
  STTF features (little-endian): magic "STTF", version u32=1, record_count
  u32, regions u32, dim u32, then record_count x [image_id u64,
  regions*dim float32]. Round-trips must be byte-exact.

  Captions: UTF-8 lines of {"image_id": <u64>, "caption": <string>}.

  Vocabulary: UTF-8 lines "token<TAB>id", reserved tokens first.
"""

from __future__ import annotations

import json
import logging
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, SttError

log = logging.getLogger(__name__)

STTF_MAGIC = b"STTF"
STTF_VERSION = 1

PAD, START, END, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<start>", "<end>", "<unk>")

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass
class FeatureStore:
    """Image features keyed by id; all records share one (regions, dim)."""

    regions: int
    dim: int
    records: dict[int, np.ndarray] = field(default_factory=dict)

    def add(self, image_id: int, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float32).reshape(self.regions, self.dim)
        self.records[int(image_id)] = values

    def get(self, image_id: int) -> np.ndarray:
        try:
            return self.records[int(image_id)]
        except KeyError:
            raise SttError(f"no feature record for image_id {image_id}") from None

    def ids(self) -> list[int]:
        return sorted(self.records)

    def __len__(self) -> int:
        return len(self.records)


def write_feature_file(store: FeatureStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(STTF_MAGIC)
        fh.write(struct.pack("<III", STTF_VERSION, len(store.records), store.regions))
        fh.write(struct.pack("<I", store.dim))
        for image_id in store.ids():
            fh.write(struct.pack("<Q", image_id))
            fh.write(store.records[image_id].astype("<f4").tobytes())


def read_feature_file(path) -> FeatureStore:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != STTF_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte 0")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header, {len(raw)} bytes")
    version, count, regions, dim = struct.unpack_from("<IIII", raw, 4)
    if version != STTF_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    if regions < 1 or dim < 1:
        raise FormatError(f"{path}: inconsistent dims regions={regions} dim={dim} at byte 12")
    store = FeatureStore(regions=regions, dim=dim)
    offset = 20
    record_bytes = 8 + regions * dim * 4
    for i in range(count):
        if offset + record_bytes > len(raw):
            raise FormatError(
                f"{path}: truncated payload, record {i} of {count} at byte {offset}")
        (image_id,) = struct.unpack_from("<Q", raw, offset)
        values = np.frombuffer(raw, dtype="<f4", count=regions * dim,
                               offset=offset + 8).reshape(regions, dim)
        store.records[int(image_id)] = values.copy()
        offset += record_bytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes at byte {offset}")
    return store


class Vocabulary:
    """Token<->id bijection with fixed reserved ids 0..3."""

    def __init__(self, tokens: list[str], min_freq: int = 1):
        self.min_freq = min_freq
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        for tok in tokens:
            if tok in self.token_to_id:
                raise SttError(f"duplicate or reserved token {tok!r}")
            self.token_to_id[tok] = len(self.token_to_id)
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[int(i)] for i in ids
                if int(i) not in (PAD, START, END)]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token, idx in sorted(self.token_to_id.items(), key=lambda kv: kv[1]):
                fh.write(f"{token}\t{idx}\n")

    @staticmethod
    def load(path) -> "Vocabulary":
        entries: dict[int, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    token, idx = line.split("\t")
                    entries[int(idx)] = token
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad vocabulary line {line!r}")
        tokens = [entries[i] for i in sorted(entries) if i >= len(RESERVED_TOKENS)]
        vocab = Vocabulary(tokens)
        if [entries.get(i) for i in range(4)] != list(RESERVED_TOKENS):
            raise FormatError(f"{path}: reserved tokens missing or misplaced")
        return vocab

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for token, idx in sorted(self.token_to_id.items(), key=lambda kv: kv[1]):
            h.update(f"{token}\t{idx}\n".encode())
        return h.hexdigest()


def tokenize_words(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation, punctuation dropped."""
    return _WORD_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Token ids wrapped with <start>/<end>; OOV words map to <unk>."""
    return [START] + vocab.encode(tokenize_words(text)) + [END]


def detokenize(ids, vocab: Vocabulary) -> str:
    return " ".join(vocab.decode(ids))


def load_captions(path) -> dict[int, list[str]]:
    """Caption file -> {image_id: [caption, ...]} preserving line order."""
    captions: dict[int, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                image_id = int(obj["image_id"])
                caption = str(obj["caption"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad caption line ({exc})")
            captions.setdefault(image_id, []).append(caption)
    return captions


def build_vocab(captions: dict[int, list[str]], min_freq: int = 1) -> Vocabulary:
    """Frequency-threshold vocabulary; ids assigned freq desc then lexicographic."""
    if min_freq < 1:
        raise SttError("min_freq must be >= 1")
    freq: dict[str, int] = {}
    for caps in captions.values():
        for cap in caps:
            for tok in tokenize_words(cap):
                freq[tok] = freq.get(tok, 0) + 1
    if not freq:
        raise SttError("caption corpus is empty")
    kept = sorted((t for t, n in freq.items() if n >= min_freq),
                  key=lambda t: (-freq[t], t))
    return Vocabulary(kept, min_freq=min_freq)


def make_paraphrase_pairs(captions: list) -> list[tuple]:
    """All ordered pairs (A, B) with distinct indices; k=1 yields one self-pair."""
    if not captions:
        raise SttError("cannot build paraphrase pairs from an empty caption list")
    if len(captions) == 1:
        return [(captions[0], captions[0])]
    return [(a, b) for i, a in enumerate(captions)
            for j, b in enumerate(captions) if i != j]


@dataclass(frozen=True)
class Sample:
    image_id: int
    caption_a: tuple[int, ...]
    caption_b: tuple[int, ...]


def make_samples(captions: dict[int, list[str]], vocab: Vocabulary) -> list[Sample]:
    """Paraphrase-pair samples; captions empty after tokenization are dropped."""
    samples: list[Sample] = []
    for image_id in sorted(captions):
        tokenized = []
        for cap in captions[image_id]:
            ids = tokenize(cap, vocab)
            if len(ids) <= 2:
                log.warning("dropping empty caption for image %d: %r", image_id, cap)
                continue
            tokenized.append(tuple(ids))
        if not tokenized:
            log.warning("image %d has no usable captions, skipped", image_id)
            continue
        for a, b in make_paraphrase_pairs(tokenized):
            samples.append(Sample(image_id, a, b))
    return samples


@dataclass
class Batch:
    features: np.ndarray      # [B, R, dim] float32
    caption_a: np.ndarray     # [B, T_a] int64, <pad> padded
    mask_a: np.ndarray        # [B, T_a] float32, 1 over real tokens
    caption_b: np.ndarray     # [B, T_b] int64
    mask_b: np.ndarray        # [B, T_b] float32
    image_ids: np.ndarray     # [B] int64

    def __len__(self) -> int:
        return self.features.shape[0]


def _pad(seqs: list[tuple[int, ...]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.float32)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def make_batches(samples: list[Sample], store: FeatureStore, batch_size: int,
                 seed: int, epoch: int = 0) -> list[Batch]:
    """Seeded shuffle (epoch-indexed), short final batch kept."""
    if not samples:
        raise SttError("no samples to batch")
    if batch_size < 1:
        raise SttError("batch_size must be >= 1")
    for s in samples:
        if s.image_id not in store.records:
            raise SttError(f"no feature record for image_id {s.image_id}")
    order = np.random.default_rng((seed, epoch)).permutation(len(samples))
    batches = []
    for lo in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[lo:lo + batch_size]]
        feats = np.stack([store.get(s.image_id) for s in chunk])
        ids_a, mask_a = _pad([s.caption_a for s in chunk])
        ids_b, mask_b = _pad([s.caption_b for s in chunk])
        batches.append(Batch(
            features=feats, caption_a=ids_a, mask_a=mask_a,
            caption_b=ids_b, mask_b=mask_b,
            image_ids=np.asarray([s.image_id for s in chunk], dtype=np.int64)))
    return batches
