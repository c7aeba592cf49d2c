"""Adam optimization loop, checkpoint persistence, and training telemetry.

Checkpoint format (little-endian): magic "STTC", version u32=1, a
length-prefixed JSON header (hyperparams plus epoch counter, vocabulary
hash, and Adam metadata), tensor count u32, then per tensor
[name_len u16, UTF-8 name, rank u8, dims u32..., float32 data]. When the
header says so, an Adam section with the same tensor layout follows
(moment arrays named "<param>.m" / "<param>.v"). Round-trips are
bit-exact.

Training is deterministic for a fixed seed: parameter init, shuffling
(epoch-indexed), and every kernel are seeded or pure, so a resumed run
reproduces the loss log of an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from . import model as m
from .data import Batch, FeatureStore, Sample, make_batches
from .errors import CheckpointError, ConfigError, TrainingError

log = logging.getLogger(__name__)

CKPT_MAGIC = b"STTC"
CKPT_VERSION = 1

LOG_HEADER = ("iter", "l_rank", "l_ic", "l_sp", "total")


@dataclass
class AdamState:
    """First/second moment arrays mirroring the parameter shapes."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def fresh(params: m.ModelParams) -> "AdamState":
        return AdamState(
            m={name: np.zeros_like(t.data) for name, t in params.named()},
            v={name: np.zeros_like(t.data) for name, t in params.named()})


def adam_step(params: m.ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update, in place."""
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, tensor in params.named():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        # moments stay in the parameter dtype so save/resume is bit-exact
        state.m[name] = (b1 * state.m[name] + (1 - b1) * g).astype(tensor.data.dtype)
        state.v[name] = (b2 * state.v[name] + (1 - b2) * g * g).astype(tensor.data.dtype)
        m_hat = state.m[name] / (1 - b1 ** state.t)
        v_hat = state.v[name] / (1 - b2 ** state.t)
        tensor.data = (tensor.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
                       ).astype(tensor.data.dtype)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


@dataclass
class Checkpoint:
    version: int
    hyper: m.HyperParams
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    vocab_hash: str = ""
    adam: AdamState | None = None
    feature_dim: int = 0
    vocab_size: int = 0

    def to_params(self) -> m.ModelParams:
        tensors = {name: ad.Tensor(arr.copy(), requires_grad=True)
                   for name, arr in self.tensors.items()}
        return m.ModelParams(tensors=tensors, feature_dim=self.feature_dim,
                             vocab_size=self.vocab_size, hyper=self.hyper)


def _write_tensor_block(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_tensor_block(raw: bytes, offset: int) -> tuple[dict[str, np.ndarray], int]:
    try:
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
            tensors[name] = arr.reshape(dims).copy()
        return tensors, offset
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupted tensor section at byte {offset}: {exc}")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = {
        "hyperparams": ckpt.hyper.to_dict(),
        "epoch": ckpt.epoch,
        "vocab_hash": ckpt.vocab_hash,
        "feature_dim": ckpt.feature_dim,
        "vocab_size": ckpt.vocab_size,
        "adam": ckpt.adam is not None,
        "adam_t": ckpt.adam.t if ckpt.adam else 0,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _write_tensor_block(fh, ckpt.tensors)
        if ckpt.adam is not None:
            moments = {f"{k}.m": v for k, v in ckpt.adam.m.items()}
            moments.update({f"{k}.v": v for k, v in ckpt.adam.v.items()})
            _write_tensor_block(fh, moments)


def load_checkpoint(path, expect_vocab_hash: str | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r} at byte 0")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, 8)
    if 12 + blob_len > len(raw):
        raise CheckpointError(f"{path}: truncated header at byte 12")
    try:
        header = json.loads(raw[12:12 + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad JSON header at byte 12: {exc}")
    tensors, offset = _read_tensor_block(raw, 12 + blob_len)
    adam = None
    if header.get("adam"):
        moments, offset = _read_tensor_block(raw, offset)
        names = sorted(tensors)
        adam = AdamState(
            m={k: moments[f"{k}.m"] for k in names},
            v={k: moments[f"{k}.v"] for k in names},
            t=int(header.get("adam_t", 0)))
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes "
                              f"at byte {offset}")
    ckpt = Checkpoint(
        version=version,
        hyper=m.HyperParams.from_dict(header["hyperparams"]),
        tensors=tensors,
        epoch=int(header.get("epoch", 0)),
        vocab_hash=header.get("vocab_hash", ""),
        adam=adam,
        feature_dim=int(header.get("feature_dim", 0)),
        vocab_size=int(header.get("vocab_size", 0)))
    if expect_vocab_hash and ckpt.vocab_hash and expect_vocab_hash != ckpt.vocab_hash:
        import warnings

        warnings.warn(f"checkpoint {path} was trained with a different "
                      f"vocabulary (hash mismatch)", stacklevel=2)
    return ckpt


@dataclass
class TrainSettings:
    """Run-level knobs that are not model hyperparameters."""

    hyper: m.HyperParams
    seed: int = 0
    mode: str = "global"          # "global" | "attention"
    out_dir: Path | None = None
    checkpoint_every: int = 1     # epochs between checkpoint writes
    vocab_hash: str = ""

    def __post_init__(self):
        if self.mode not in ("global", "attention"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


def load_config(path) -> dict:
    """JSON config document; unknown keys rejected."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = {"hyperparams", "seed", "mode", "checkpoint_every"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config fields: {sorted(unknown)}")
    if "hyperparams" in doc:
        m.HyperParams.from_dict(doc["hyperparams"])  # validate eagerly
    return doc


def _decode_conditioning(batch: Batch, params: m.ModelParams,
                         image_embs: ad.Tensor, mode: str) -> ad.Tensor:
    """What the caption decoder is conditioned on for this batch."""
    if mode != "attention" or batch.features.shape[1] == 1:
        return image_embs
    # attention mode: mean of the per-region embeddings, one row per item
    rows = []
    for i in range(len(batch)):
        _, mean = m.encode_image_regions(batch.features[i], params)
        rows.append(mean)
    return ad.concat(rows, axis=0)


def train_step(batch: Batch, params: m.ModelParams, state: AdamState,
               settings: TrainSettings) -> losses.LossBreakdown:
    """One forward/backward/update cycle over a batch."""
    hyper = settings.hyper
    image_embs = m.encode_images(batch.features, params)
    caption_embs, _ = m.encode_sentences(batch.caption_a, batch.mask_a, params)

    l_rank = losses.ranking_loss(image_embs, caption_embs, batch.image_ids,
                                 hyper.margin, hyper.negative_mode)

    targets = batch.caption_b[:, 1:]
    mask = batch.mask_b[:, 1:]
    ic_source = _decode_conditioning(batch, params, image_embs, settings.mode)
    ic_steps = m.decode_teacher_forced_batch(ic_source, batch.caption_b, params)
    l_ic = losses.sequence_cross_entropy_steps(ic_steps, targets, mask)
    sp_steps = m.decode_teacher_forced_batch(caption_embs, batch.caption_b, params)
    l_sp = losses.sequence_cross_entropy_steps(sp_steps, targets, mask)

    components = (l_rank.item(), l_ic.item(), l_sp.item())
    if not all(np.isfinite(components)):
        raise TrainingError(f"non-finite loss components {components}")
    breakdown = losses.combined_loss(l_rank, l_ic, l_sp, hyper.lambda_rank,
                                     hyper.lambda_caption, hyper.lambda_paraphrase)
    total = breakdown.total_tensor
    leaves = params.all()
    ad.zero_grads(leaves)
    ad.backward(ad.Graph.trace(total), total, leaves=leaves)
    grads = {name: t.grad for name, t in params.named()}
    clip_gradients(grads, hyper.clip_norm)
    adam_step(params, grads, state, hyper.learning_rate)
    return breakdown


def _make_checkpoint(params: m.ModelParams, state: AdamState | None,
                     settings: TrainSettings, epoch: int) -> Checkpoint:
    return Checkpoint(
        version=CKPT_VERSION,
        hyper=settings.hyper,
        tensors={name: t.data.copy() for name, t in params.named()},
        epoch=epoch,
        vocab_hash=settings.vocab_hash,
        adam=state,
        feature_dim=params.feature_dim,
        vocab_size=params.vocab_size)


def write_log(rows: list[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        writer.writerows(rows)


def train(settings: TrainSettings, store: FeatureStore, samples: list[Sample],
          vocab_size: int, resume_from: Checkpoint | None = None
          ) -> tuple[Checkpoint, list[tuple]]:
    """Full training run; returns the final checkpoint and per-iteration log.

    The log rows are (iteration, l_rank, l_ic, l_sp, total). When
    ``out_dir`` is set, epoch checkpoints, the final checkpoint, and the
    CSV log are written there; a crash checkpoint is written if a
    non-finite loss or gradient aborts the run.
    """
    hyper = settings.hyper
    if resume_from is not None:
        resumed = resume_from.hyper
        if (resumed.embed_dim, resumed.word_dim, resumed.hidden_dim) != \
                (hyper.embed_dim, hyper.word_dim, hyper.hidden_dim):
            raise ConfigError(
                "resume checkpoint was trained with different model dims")
        params = resume_from.to_params()
        state = resume_from.adam or AdamState.fresh(params)
        start_epoch = resume_from.epoch
    else:
        params = m.init_params(hyper, store.dim, vocab_size, seed=settings.seed)
        state = AdamState.fresh(params)
        start_epoch = 0

    out = Path(settings.out_dir) if settings.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    rows: list[tuple] = []
    iteration = start_epoch * -(-len(samples) // hyper.batch_size)
    try:
        for epoch in range(start_epoch, hyper.epochs):
            for batch in make_batches(samples, store, hyper.batch_size,
                                      settings.seed, epoch=epoch):
                breakdown = train_step(batch, params, state, settings)
                iteration += 1
                rows.append((iteration, breakdown.l_rank, breakdown.l_ic,
                             breakdown.l_sp, breakdown.total))
                if not np.isfinite(breakdown.total):
                    raise TrainingError(
                        f"non-finite loss at iteration {iteration}")
            if out and (epoch + 1) % settings.checkpoint_every == 0:
                save_checkpoint(_make_checkpoint(params, state, settings,
                                                 epoch + 1),
                                out / f"epoch_{epoch + 1:04d}.sttc")
    except TrainingError:
        if out:
            save_checkpoint(_make_checkpoint(params, state, settings, -1),
                            out / "crash.sttc")
            write_log(rows, out / "log.csv")
        raise

    final = _make_checkpoint(params, state, settings, hyper.epochs)
    if out:
        save_checkpoint(final, out / "final.sttc")
        write_log(rows, out / "log.csv")
    return final, rows
