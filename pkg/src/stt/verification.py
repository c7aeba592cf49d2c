"""Finite-difference verification suite: every op kind plus the three losses.

Runs in float64 with central differences (step 1e-5). Op kinds must hit
relative error below 1e-6, the loss functions below 1e-5 (they chain many
ops, so a slightly looser bound).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses

OP_TOLERANCE = 1e-6
LOSS_TOLERANCE = 1e-5

ALL_OP_KINDS = ad.OP_KINDS + ("transpose", "reshape", "gather_rows",
                              "l2_normalize", "cosine_similarity")


def check_ops(instances: int = 20, seed: int = 0) -> list[dict]:
    return [ad.grad_check(kind, tolerance=OP_TOLERANCE, instances=instances,
                          seed=seed) for kind in ALL_OP_KINDS]


def _check_ranking(mode: str, instances: int, seed: int) -> dict:
    worst = 0.0
    with ad.verification_mode():
        rng = np.random.default_rng(seed)
        for _ in range(instances):
            b = int(rng.integers(2, 6))
            ids = list(range(b))

            def f(i, c):
                return losses.ranking_loss(ad.l2_normalize(i), ad.l2_normalize(c),
                                           ids, margin=0.2, mode=mode)

            i = ad.Tensor(rng.standard_normal((b, 4)), requires_grad=True)
            c = ad.Tensor(rng.standard_normal((b, 4)), requires_grad=True)
            worst = max(worst, ad.check_function(f, [i, c])["max_rel_err"])
    return {"kind": f"ranking_loss[{mode}]", "max_rel_err": worst,
            "pass": worst < LOSS_TOLERANCE}


def _check_sequence_ce(name: str, instances: int, seed: int) -> dict:
    worst = 0.0
    with ad.verification_mode():
        rng = np.random.default_rng(seed)
        for _ in range(instances):
            t, v = int(rng.integers(1, 5)), int(rng.integers(2, 6))
            tgt = rng.integers(0, v, size=t)
            msk = np.ones(t)

            def f(logits):
                return losses.sequence_cross_entropy(
                    ad.log_softmax(logits), tgt, msk)

            logits = ad.Tensor(rng.standard_normal((t, v)), requires_grad=True)
            worst = max(worst, ad.check_function(f, [logits])["max_rel_err"])
    return {"kind": name, "max_rel_err": worst, "pass": worst < LOSS_TOLERANCE}


def check_losses(instances: int = 20, seed: int = 0) -> list[dict]:
    """The ranking loss (both negative modes) and both decoding losses."""
    return [
        _check_ranking("sum", instances, seed),
        _check_ranking("hardest", instances, seed + 1),
        _check_sequence_ce("caption_cross_entropy", instances, seed + 2),
        _check_sequence_ce("paraphrase_cross_entropy", instances, seed + 3),
    ]


def run_all(instances: int = 20, seed: int = 0) -> list[dict]:
    return check_ops(instances, seed) + check_losses(instances, seed)
