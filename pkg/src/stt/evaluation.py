"""Task harnesses: cross-modal retrieval, captioning, and paraphrasing.

Everything here consumes a loaded checkpoint's parameters plus feature and
caption files, and produces plain dict reports that the CLI serializes.
Attention-mode retrieval scores each (image, caption) pair through the
region/word attention path; global mode is a single embedding matrix
product. STT_THREADS caps the worker threads used for the attention
scoring grid (results are merged in deterministic order either way).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import data as dio
from . import metrics
from . import model as m
from .errors import SttError


def worker_count() -> int:
    raw = os.environ.get("STT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _caption_table(captions: dict[int, list[str]], vocab: dio.Vocabulary
                   ) -> tuple[list[int], list[list[int]], list[list[str]]]:
    """Flatten to aligned (owner image ids, token id seqs, word lists)."""
    owners: list[int] = []
    token_ids: list[list[int]] = []
    words: list[list[str]] = []
    for image_id in sorted(captions):
        for cap in captions[image_id]:
            ids = dio.tokenize(cap, vocab)
            if len(ids) <= 2:
                continue
            owners.append(image_id)
            token_ids.append(ids)
            words.append(dio.tokenize_words(cap))
    if not owners:
        raise SttError("no usable captions for evaluation")
    return owners, token_ids, words


def similarity_matrix(params: m.ModelParams, store: dio.FeatureStore,
                      captions: dict[int, list[str]], vocab: dio.Vocabulary,
                      mode: str = "global", aggregation: str = "mean"
                      ) -> metrics.SimilarityMatrix:
    """Image-by-caption scores for every image in the store."""
    image_ids = store.ids()
    missing = [i for i in sorted(captions) if i not in store.records]
    if missing:
        raise SttError(f"captions reference images without features: {missing[:5]}")
    owners, token_ids, _ = _caption_table(captions, vocab)

    gt_columns: list[list[int]] = []
    for image_id in image_ids:
        cols = [c for c, owner in enumerate(owners) if owner == image_id]
        if not cols:
            raise SttError(f"image {image_id} has no captions")
        gt_columns.append(cols)

    if mode == "global":
        img = np.stack([m.encode_image(store.get(i), params).data
                        for i in image_ids])
        cap = np.stack([m.encode_sentence(ids, params)[0].data
                        for ids in token_ids])
        values = img @ cap.T
    elif mode == "attention":
        regions = [m.encode_image_regions(store.get(i), params)[0].data
                   for i in image_ids]
        words = [m.encode_sentence(ids, params)[1].data for ids in token_ids]

        def score_row(region_set):
            return [m.attention_similarity(region_set, w, aggregation)
                    for w in words]

        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            rows = list(pool.map(score_row, regions))
        values = np.asarray(rows)
    else:
        raise SttError(f"unknown similarity mode {mode!r}")
    return metrics.SimilarityMatrix(values=values, gt_columns=gt_columns,
                                    image_ids=image_ids)


def eval_retrieval(params: m.ModelParams, store: dio.FeatureStore,
                   captions: dict[int, list[str]], vocab: dio.Vocabulary,
                   mode: str = "global", folds: int = 1,
                   aggregation: str = "mean") -> dict:
    sim = similarity_matrix(params, store, captions, vocab, mode, aggregation)
    if folds > 1:
        report = metrics.five_fold_eval(sim, folds=folds)
    else:
        report = metrics.retrieval_report(sim)
        report["folds"] = 1
    report["mode"] = mode
    report["images"] = len(sim.gt_columns)
    report["captions"] = sim.values.shape[1]
    return report


def decode_source(params: m.ModelParams, features: np.ndarray,
                   mode: str):
    """Decoder conditioning input for one image."""
    if mode == "attention" and features.shape[0] > 1:
        _, mean = m.encode_image_regions(features, params)
        return mean
    return m.encode_image(features, params)


def eval_caption_task(params: m.ModelParams, store: dio.FeatureStore,
                      captions: dict[int, list[str]], vocab: dio.Vocabulary,
                      mode: str = "global", max_len: int | None = None) -> dict:
    """Greedy-decode a caption per image; score against its references."""
    missing = [i for i in sorted(captions) if i not in store.records]
    if missing:
        raise SttError(f"missing features for images: {missing[:5]}")
    max_len = max_len or params.hyper.max_decode_len
    candidates: list[list[str]] = []
    reference_sets: list[list[list[str]]] = []
    for image_id in sorted(captions):
        refs = [dio.tokenize_words(c) for c in captions[image_id]]
        refs = [r for r in refs if r]
        if not refs:
            continue
        source = decode_source(params, store.get(image_id), mode)
        decoded = m.decode_greedy(source, params, max_len)
        candidates.append(vocab.decode(decoded))
        reference_sets.append(refs)
    return _generation_report(candidates, reference_sets, mode)


def eval_paraphrase_task(params: m.ModelParams,
                         captions: dict[int, list[str]],
                         vocab: dio.Vocabulary,
                         max_len: int | None = None) -> dict:
    """Each caption queries once; references are its same-image siblings."""
    max_len = max_len or params.hyper.max_decode_len
    candidates: list[list[str]] = []
    reference_sets: list[list[list[str]]] = []
    skipped = 0
    for image_id in sorted(captions):
        caps = captions[image_id]
        word_lists = [dio.tokenize_words(c) for c in caps]
        for qi, cap in enumerate(caps):
            ids = dio.tokenize(cap, vocab)
            if len(ids) <= 2:
                continue
            refs = [w for ri, w in enumerate(word_lists) if ri != qi and w]
            if not refs:
                skipped += 1  # no siblings to score against
                continue
            emb, _ = m.encode_sentence(ids, params)
            decoded = m.decode_greedy(emb, params, max_len)
            candidates.append(vocab.decode(decoded))
            reference_sets.append(refs)
    if not candidates:
        raise SttError("no caption had siblings to paraphrase against")
    report = _generation_report(candidates, reference_sets, mode="global")
    report["skipped_queries"] = skipped
    return report


def _generation_report(candidates, reference_sets, mode: str) -> dict:
    scores = metrics.bleu(candidates, reference_sets, max_n=4)
    meteor_values = [metrics.meteor_exact(c, refs) if c else 0.0
                     for c, refs in zip(candidates, reference_sets)]
    report = {f"b@{n}": scores[f"bleu{n}"] for n in range(1, 5)}
    report["meteor"] = float(np.mean(meteor_values))
    report["samples"] = len(candidates)
    report["mode"] = mode
    return report


def next_token_accuracy(params: m.ModelParams, store: dio.FeatureStore,
                        samples: list[dio.Sample]) -> float:
    """Teacher-forced argmax accuracy of the captioning path over samples."""
    correct = 0
    total = 0
    for s in samples:
        emb = m.encode_image(store.get(s.image_id), params)
        logp = m.decode_teacher_forced(emb, list(s.caption_b), params)
        targets = np.asarray(s.caption_b[1:])
        predicted = np.argmax(logp.data, axis=1)
        correct += int((predicted == targets).sum())
        total += targets.size
    if total == 0:
        raise SttError("no decoding steps to measure")
    return correct / total
