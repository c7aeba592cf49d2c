"""Ranking, captioning, and paraphrasing losses plus their weighted sum.

The ranking term drives matched image/caption cosine above every in-batch
mismatch by a margin, in both retrieval directions; negatives sharing the
query's image id are masked (paraphrase sampling can place the same image
twice in a batch). The two decoding losses are one masked
sequence-cross-entropy implementation fed by either decoder path. All
three are batch means so the weights stay scale-stable across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, SttError


@dataclass
class LossBreakdown:
    l_rank: float
    l_ic: float
    l_sp: float
    total: float
    lambdas: tuple[float, float, float]
    total_tensor: ad.Tensor | None = None


def negative_mask(image_ids) -> np.ndarray:
    """1 where the column is a usable negative for the row (distinct image)."""
    ids = np.asarray(image_ids)
    return (ids[:, None] != ids[None, :]).astype(np.float64)


def _hinge_terms(s: np.ndarray, mask: np.ndarray, margin: float
                 ) -> tuple[np.ndarray, np.ndarray]:
    diag = np.diagonal(s)
    rows = np.maximum(0.0, margin + s - diag[:, None]) * mask   # image -> text
    cols = np.maximum(0.0, margin + s - diag[None, :]) * mask   # text -> image
    return rows, cols


def margin_hinge(scores: ad.Tensor, image_ids, margin: float,
                 mode: str = "sum") -> ad.Tensor:
    """Bidirectional hinge over a [B, B] similarity matrix, averaged over B."""
    if scores.data.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"margin_hinge: expected square matrix, got {scores.shape}")
    if mode not in ("sum", "hardest"):
        raise SttError(f"unknown negative mode {mode!r}")
    b = scores.shape[0]
    mask = negative_mask(image_ids)
    if mask.shape != scores.data.shape:
        raise ShapeError(f"margin_hinge: {len(image_ids)} ids for {scores.shape}")
    rows, cols = _hinge_terms(scores.data, mask, margin)

    if mode == "sum":
        value = (rows.sum() + cols.sum()) / b
    else:
        value = (rows.max(axis=1).sum() + cols.max(axis=0).sum()) / b

    def _bw(out: ad.Tensor):
        if not scores.requires_grad:
            return
        g = np.zeros_like(scores.data)
        if mode == "sum":
            active_r = (rows > 0).astype(scores.data.dtype)
            active_c = (cols > 0).astype(scores.data.dtype)
            g += active_r + active_c
            np.fill_diagonal(g, g.diagonal() - active_r.sum(axis=1)
                             - active_c.sum(axis=0))
        else:
            for i in range(b):
                j = int(np.argmax(rows[i]))
                if rows[i, j] > 0:
                    g[i, j] += 1.0
                    g[i, i] -= 1.0
            for k in range(b):
                i = int(np.argmax(cols[:, k]))
                if cols[i, k] > 0:
                    g[i, k] += 1.0
                    g[k, k] -= 1.0
        scores.accumulate_grad(out.grad * g / b)

    return ad._result(np.asarray(value, dtype=scores.data.dtype), "margin_hinge",
                      (scores,), _bw)


def ranking_loss(image_embs: ad.Tensor, caption_embs: ad.Tensor, image_ids,
                 margin: float, mode: str = "sum") -> ad.Tensor:
    """Margin ranking loss over unit-normalized embedding rows.

    Row k of both matrices is a matched pair; every other row is a
    candidate negative unless it shares the image id.
    """
    if image_embs.shape != caption_embs.shape or image_embs.data.ndim != 2:
        raise ShapeError(f"ranking_loss: embedding shapes {image_embs.shape} "
                         f"vs {caption_embs.shape}")
    if image_embs.shape[0] < 1:
        raise ShapeError("ranking_loss: empty batch")
    scores = ad.matmul(image_embs, ad.transpose(caption_embs))
    return margin_hinge(scores, image_ids, margin, mode)


def _masked_onehot(targets: np.ndarray, mask: np.ndarray, vocab: int,
                   dtype) -> np.ndarray:
    """[T, V] (or [B, V] per step) selector: mask value at the target column."""
    n = targets.shape[0]
    out = np.zeros((n, vocab), dtype=dtype)
    out[np.arange(n), targets] = mask
    return out


def sequence_cross_entropy(log_probs, targets, mask) -> ad.Tensor:
    """Masked negative log-likelihood, summed per item, mean over items.

    ``log_probs`` is one [T, V] tensor or a list of them (one per batch
    item); ``targets``/``mask`` align per item and step.
    """
    if isinstance(log_probs, ad.Tensor):
        log_probs, targets, mask = [log_probs], [targets], [mask]
    if not log_probs:
        raise SttError("sequence_cross_entropy: empty batch")
    picked: list[ad.Tensor] = []
    for lp, tgt, m in zip(log_probs, targets, mask):
        tgt = np.asarray(tgt, dtype=np.int64)
        m = np.asarray(m, dtype=lp.data.dtype)
        if lp.data.ndim != 2 or tgt.shape != (lp.shape[0],) or m.shape != tgt.shape:
            raise ShapeError(f"sequence_cross_entropy: log_probs {lp.shape}, "
                             f"targets {tgt.shape}, mask {m.shape}")
        if m.sum() < 1:
            raise SttError("sequence_cross_entropy: fully masked item")
        selector = _masked_onehot(tgt, m, lp.shape[1], lp.data.dtype)
        picked.append(ad.sum_all(ad.mul(lp, ad.Tensor(selector))))
    total = picked[0]
    for p in picked[1:]:
        total = ad.add(total, p)
    return ad.scalar_mul(total, -1.0 / len(picked))


def sequence_cross_entropy_steps(step_log_probs: list[ad.Tensor],
                                 targets: np.ndarray,
                                 mask: np.ndarray) -> ad.Tensor:
    """Step-major layout of the same objective, for batched decoding.

    ``step_log_probs[t]`` is [B, V] scoring targets[:, t]; result equals
    the item-major form exactly.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask)
    if not step_log_probs:
        raise SttError("sequence_cross_entropy_steps: no steps")
    b, t = targets.shape
    if len(step_log_probs) != t or mask.shape != (b, t):
        raise ShapeError(f"sequence_cross_entropy_steps: {len(step_log_probs)} "
                         f"steps for targets {targets.shape}, mask {mask.shape}")
    if np.any(mask.sum(axis=1) < 1):
        raise SttError("sequence_cross_entropy_steps: fully masked item")
    vocab = step_log_probs[0].shape[1]
    total: ad.Tensor | None = None
    for step, lp in enumerate(step_log_probs):
        selector = _masked_onehot(targets[:, step], mask[:, step].astype(lp.data.dtype),
                                  vocab, lp.data.dtype)
        picked = ad.sum_all(ad.mul(lp, ad.Tensor(selector)))
        total = picked if total is None else ad.add(total, picked)
    return ad.scalar_mul(total, -1.0 / b)


def combined_loss(l_rank, l_ic, l_sp, lam_rank: float, lam_ic: float,
                  lam_sp: float) -> LossBreakdown:
    """Weighted sum of the three components; accepts floats or tensors."""
    lambdas = (float(lam_rank), float(lam_ic), float(lam_sp))
    if min(lambdas) < 0:
        raise SttError("loss weights must be non-negative")
    total_tensor = None
    components = (l_rank, l_ic, l_sp)
    if any(isinstance(x, ad.Tensor) for x in components):
        tensors = [x if isinstance(x, ad.Tensor)
                   else ad.Tensor(np.asarray(float(x))) for x in components]
        parts = [ad.scalar_mul(x, lam) for x, lam in zip(tensors, lambdas)]
        total_tensor = parts[0]
        for p in parts[1:]:
            total_tensor = ad.add(total_tensor, p)
        values = [t.item() for t in tensors]
        total = total_tensor.item()
    else:
        values = [float(x) for x in components]
        total = sum(lam * v for lam, v in zip(lambdas, values))
    if not all(np.isfinite(values)):
        raise SttError(f"non-finite loss components {values}")
    return LossBreakdown(l_rank=values[0], l_ic=values[1], l_sp=values[2],
                         total=total, lambdas=lambdas, total_tensor=total_tensor)
