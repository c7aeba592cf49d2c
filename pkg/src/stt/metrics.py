"""Retrieval and generation metrics: R@K with fold averaging, corpus BLEU,
and an exact-match unigram METEOR variant.

BLEU is the unsmoothed corpus formulation: clipped modified n-gram
precision, geometric mean over orders, brevity penalty from per-sentence
closest reference lengths. METEOR here matches unigrams exactly (no
stemming or synonyms), so absolute values are not comparable to
resource-backed METEOR implementations.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, SttError

I2T = "i2t"  # image query, caption candidates
T2I = "t2i"  # caption query, image candidates
DIRECTIONS = (I2T, T2I)


@dataclass
class SimilarityMatrix:
    """Image-by-caption score matrix with ground-truth column ownership."""

    values: np.ndarray                     # [n_images, n_captions]
    gt_columns: list[list[int]]            # per image row, its caption columns
    image_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        n_img, n_cap = self.values.shape
        if len(self.gt_columns) != n_img:
            raise ShapeError(f"similarity matrix has {n_img} rows but "
                             f"{len(self.gt_columns)} ground-truth sets")
        for row, cols in enumerate(self.gt_columns):
            if not cols:
                raise SttError(f"image row {row} owns no ground-truth caption")
            if any(c < 0 or c >= n_cap for c in cols):
                raise ShapeError(f"ground-truth column out of range in row {row}")


def _ranked(scores: np.ndarray) -> np.ndarray:
    # stable sort of negated scores: ties resolve to the lower index
    return np.argsort(-scores, kind="stable")


def recall_at_k(sim: SimilarityMatrix, direction: str, k: int) -> float:
    """Percent of queries with any ground-truth candidate in the top K."""
    n_img, n_cap = sim.values.shape
    if direction not in DIRECTIONS:
        raise SttError(f"unknown direction {direction!r}")
    candidates = n_cap if direction == I2T else n_img
    if k < 1 or k > candidates:
        raise SttError(f"K={k} out of range for {candidates} candidates")

    if direction == I2T:
        hits = 0
        for row in range(n_img):
            top = _ranked(sim.values[row])[:k]
            gt = set(sim.gt_columns[row])
            hits += bool(gt.intersection(top.tolist()))
        return 100.0 * hits / n_img

    owner = np.full(n_cap, -1, dtype=np.int64)  # -1: column owned by no image
    for row, cols in enumerate(sim.gt_columns):
        for c in cols:
            owner[c] = row
    hits = 0
    for col in range(n_cap):
        top = _ranked(sim.values[:, col])[:k]
        hits += owner[col] in top.tolist()
    return 100.0 * hits / n_cap


def retrieval_report(sim: SimilarityMatrix, ks=(1, 5, 10)) -> dict:
    """R@K for both directions; K values beyond the candidate count are capped."""
    report: dict = {}
    n_img, n_cap = sim.values.shape
    for direction, candidates in ((I2T, n_cap), (T2I, n_img)):
        for k in ks:
            report[f"{direction}_r@{k}"] = recall_at_k(sim, direction,
                                                       min(k, candidates))
    return report


def five_fold_eval(sim: SimilarityMatrix, folds: int = 5, ks=(1, 5, 10)) -> dict:
    """Independent metrics per contiguous image fold, then arithmetic mean.

    Each fold is restricted to its own images' captions.
    """
    n_img = sim.values.shape[0]
    if folds < 1 or n_img % folds != 0:
        raise SttError(f"{n_img} images not divisible into {folds} folds")
    size = n_img // folds
    per_fold: list[dict] = []
    for f in range(folds):
        rows = range(f * size, (f + 1) * size)
        cols: list[int] = []
        gt: list[list[int]] = []
        for row in rows:
            remapped = []
            for c in sim.gt_columns[row]:
                remapped.append(len(cols))
                cols.append(c)
            gt.append(remapped)
        fold_sim = SimilarityMatrix(values=sim.values[np.ix_(list(rows), cols)],
                                    gt_columns=gt)
        per_fold.append(retrieval_report(fold_sim, ks))
    averaged = {key: float(np.mean([fd[key] for fd in per_fold]))
                for key in per_fold[0]}
    averaged["folds"] = folds
    averaged["per_fold"] = per_fold
    return averaged


# ---------------------------------------------------------------------------
# generation metrics


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: list[list[str]], reference_sets: list[list[list[str]]],
         max_n: int = 4) -> dict[str, float]:
    """Corpus BLEU@1..max_n, no smoothing.

    ``candidates[i]`` is scored against every tokenized reference in
    ``reference_sets[i]``; the brevity penalty uses each sentence's
    closest reference length (ties to the shorter).
    """
    if not candidates or len(candidates) != len(reference_sets):
        raise SttError("bleu: empty corpus or misaligned references")
    if max_n < 1 or max_n > 4:
        raise SttError("bleu: max_n must be in 1..4")
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, reference_sets):
        if not refs:
            raise SttError("bleu: candidate with no references")
        cand_len += len(cand)
        ref_len += min((len(r) for r in refs),
                       key=lambda L: (abs(L - len(cand)), L))
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            if not counts:
                continue
            clip = Counter()
            for ref in refs:
                clip |= _ngrams(ref, n)
            matched[n - 1] += sum(min(c, clip[g]) for g, c in counts.items())
            total[n - 1] += sum(counts.values())

    bp = 1.0 if cand_len >= ref_len or cand_len == 0 \
        else math.exp(1.0 - ref_len / cand_len)
    scores: dict[str, float] = {}
    log_sum = 0.0
    dead = False
    defined = 0  # orders with any candidate n-gram; always a prefix of 1..max_n
    for n in range(1, max_n + 1):
        if total[n - 1] == 0:
            # corpus too short for this order: fall back to the last
            # attainable cumulative score (keeps bleu(x, x) == 1)
            scores[f"bleu{n}"] = scores[f"bleu{n - 1}"] if n > 1 else 0.0
            continue
        defined = n
        p = matched[n - 1] / total[n - 1]
        dead = dead or p == 0.0
        if not dead:
            log_sum += math.log(p)
            scores[f"bleu{n}"] = bp * math.exp(log_sum / defined)
        else:
            scores[f"bleu{n}"] = 0.0
    return scores


def _greedy_alignment(candidate: list[str], reference: list[str]
                      ) -> tuple[int, int]:
    """(matches, chunks) from a left-to-right greedy unigram alignment.

    Each candidate token takes the reference position that continues the
    current chunk when possible, else the earliest unused one.
    """
    used = [False] * len(reference)
    pairs: list[tuple[int, int]] = []  # (candidate index, reference index)
    prev_ref = -2
    for ci, tok in enumerate(candidate):
        chosen = -1
        cont = prev_ref + 1
        if 0 <= cont < len(reference) and not used[cont] and reference[cont] == tok:
            chosen = cont
        else:
            for ri, rtok in enumerate(reference):
                if not used[ri] and rtok == tok:
                    chosen = ri
                    break
        if chosen >= 0:
            used[chosen] = True
            pairs.append((ci, chosen))
            prev_ref = chosen
        else:
            prev_ref = -2
    if not pairs:
        return 0, 0
    chunks = 1
    for (c0, r0), (c1, r1) in zip(pairs, pairs[1:]):
        if c1 != c0 + 1 or r1 != r0 + 1:
            chunks += 1
    return len(pairs), chunks


def meteor_exact(candidate: list[str], reference_set: list[list[str]]) -> float:
    """Exact-match METEOR: recall-weighted F over a greedy unigram alignment,
    discounted by a cubic chunk-fragmentation penalty; best over references."""
    if not candidate or not reference_set or any(not r for r in reference_set):
        raise SttError("meteor_exact: empty candidate or reference")
    best = 0.0
    for ref in reference_set:
        matches, chunks = _greedy_alignment(candidate, ref)
        if matches == 0:
            continue
        precision = matches / len(candidate)
        recall = matches / len(ref)
        f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
        penalty = 0.5 * (chunks / matches) ** 3
        best = max(best, f_mean * (1.0 - penalty))
    return best
