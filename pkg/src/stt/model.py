"""Encoders into the joint embedding space, the shared decoder, and
region/word attention scoring.

Images and sentences are both projected into one D-dimensional space and
unit-normalized, so dot products are cosine similarities. A single decoder
LSTM (one shared parameter set) turns either kind of embedding back into a
caption: the embedding is mapped to the decoder's initial hidden and cell
state, keeping the interface identical for both sources.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .data import END, START
from .errors import ConfigError, ShapeError

INIT_SCALE = 0.08           # uniform weight init half-range
ATTENTION_TEMPERATURE = 9.0  # softmax sharpening over regions
LSE_TEMPERATURE = 6.0        # LogSumExp aggregation alternative


@dataclass
class HyperParams:
    embed_dim: int = 1024        # joint-space dimensionality
    word_dim: int = 300
    hidden_dim: int = 1024
    margin: float = 0.2
    lambda_rank: float = 1.0
    lambda_caption: float = 1.0
    lambda_paraphrase: float = 1.0
    learning_rate: float = 0.0002
    batch_size: int = 128
    epochs: int = 15
    num_regions: int = 36
    max_decode_len: int = 20
    negative_mode: str = "sum"   # "sum" | "hardest"
    clip_norm: float = 2.0       # 0 disables gradient clipping

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if min(self.lambda_rank, self.lambda_caption, self.lambda_paraphrase) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.num_regions < 1:
            raise ConfigError("num_regions must be >= 1")
        if self.negative_mode not in ("sum", "hardest"):
            raise ConfigError(f"unknown negative_mode {self.negative_mode!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(d: dict) -> "HyperParams":
        known = {f.name for f in fields(HyperParams)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return HyperParams(**d)


PROFILES = {
    "paper": HyperParams(),
    "toy": HyperParams(embed_dim=32, word_dim=16, hidden_dim=32,
                       learning_rate=0.01, batch_size=32, epochs=20,
                       num_regions=1, max_decode_len=12),
}


@dataclass
class ModelParams:
    """All trainable weights, as named requires_grad tensors."""

    tensors: dict[str, ad.Tensor] = field(default_factory=dict)
    feature_dim: int = 0
    vocab_size: int = 0
    hyper: HyperParams | None = None

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def named(self) -> list[tuple[str, ad.Tensor]]:
        return sorted(self.tensors.items())

    def all(self) -> list[ad.Tensor]:
        return [t for _, t in self.named()]


def _uniform(rng, shape) -> np.ndarray:
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)


def _lstm_weights(rng, in_dim: int, hidden: int) -> dict[str, np.ndarray]:
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = 1.0  # forget gate bias; standard stability trick
    return {
        "w_x": _uniform(rng, (in_dim, 4 * hidden)),
        "w_h": _uniform(rng, (hidden, 4 * hidden)),
        "bias": bias,
    }


def init_params(hyper: HyperParams, feature_dim: int, vocab_size: int,
                seed: int = 0) -> ModelParams:
    """Deterministic seeded initialization; biases zero, forget gate +1."""
    rng = np.random.default_rng(seed)
    d, dw, h = hyper.embed_dim, hyper.word_dim, hyper.hidden_dim
    arrays: dict[str, np.ndarray] = {
        "img_proj.weight": _uniform(rng, (feature_dim, d)),
        "img_proj.bias": np.zeros(d),
        "word_emb.weight": _uniform(rng, (vocab_size, dw)),
    }
    arrays.update({f"enc_lstm.{k}": v for k, v in _lstm_weights(rng, dw, h).items()})
    arrays.update({
        "sent_proj.weight": _uniform(rng, (h, d)),
        "sent_proj.bias": np.zeros(d),
    })
    arrays.update({f"dec_lstm.{k}": v for k, v in _lstm_weights(rng, dw, h).items()})
    arrays.update({
        "dec_out.weight": _uniform(rng, (h, vocab_size)),
        "dec_out.bias": np.zeros(vocab_size),
        "state_h.weight": _uniform(rng, (d, h)),
        "state_h.bias": np.zeros(h),
        "state_c.weight": _uniform(rng, (d, h)),
        "state_c.bias": np.zeros(h),
    })
    tensors = {name: ad.Tensor(arr, requires_grad=True)
               for name, arr in arrays.items()}
    return ModelParams(tensors=tensors, feature_dim=feature_dim,
                       vocab_size=vocab_size, hyper=hyper)


def _lstm_step(params: ModelParams, prefix: str, x: ad.Tensor,
               h: ad.Tensor, c: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    """One four-gate step over a [B, *] batch."""
    hidden = h.shape[1]
    gates = ad.add(ad.add(ad.matmul(x, params[f"{prefix}.w_x"]),
                          ad.matmul(h, params[f"{prefix}.w_h"])),
                   params[f"{prefix}.bias"])
    i = ad.sigmoid(ad.slice_axis(gates, 1, 0, hidden))
    f = ad.sigmoid(ad.slice_axis(gates, 1, hidden, 2 * hidden))
    g = ad.tanh(ad.slice_axis(gates, 1, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.slice_axis(gates, 1, 3 * hidden, 4 * hidden))
    c_next = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_next = ad.mul(o, ad.tanh(c_next))
    return h_next, c_next


def _fc(params: ModelParams, prefix: str, x: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


# ---------------------------------------------------------------------------
# image side


def encode_images(features: np.ndarray, params: ModelParams) -> ad.Tensor:
    """[B, R, dim] features -> [B, D] unit-norm embeddings (regions mean-pooled)."""
    feats = np.asarray(features, dtype=ad.default_dtype())
    if feats.ndim != 3 or feats.shape[2] != params.feature_dim:
        raise ShapeError(f"encode_images: expected [B, R, {params.feature_dim}], "
                         f"got {feats.shape}")
    pooled = ad.Tensor(feats.mean(axis=1))
    return ad.l2_normalize(_fc(params, "img_proj", pooled))


def encode_image(features: np.ndarray, params: ModelParams) -> ad.Tensor:
    """Single image [R, dim] -> unit embedding [D]."""
    features = np.asarray(features)
    batched = encode_images(features[None, :, :], params)
    return ad.reshape(batched, (batched.shape[1],))


def encode_image_regions(features: np.ndarray, params: ModelParams
                         ) -> tuple[ad.Tensor, ad.Tensor]:
    """[N, dim] region features -> (unit region embeddings [N, D], their mean [1, D]).

    The mean is the conditioning input for attention-mode decoding and is
    deliberately not re-normalized.
    """
    feats = np.asarray(features, dtype=ad.default_dtype())
    if feats.ndim != 2 or feats.shape[1] != params.feature_dim:
        raise ShapeError(f"encode_image_regions: expected [N, {params.feature_dim}], "
                         f"got {feats.shape}")
    regions = ad.l2_normalize(_fc(params, "img_proj", ad.Tensor(feats)))
    n = regions.shape[0]
    mean = ad.matmul(ad.Tensor(np.full((1, n), 1.0 / n)), regions)
    return regions, mean


# ---------------------------------------------------------------------------
# sentence side


def encode_sentences(token_ids: np.ndarray, mask: np.ndarray,
                     params: ModelParams) -> tuple[ad.Tensor, list[ad.Tensor]]:
    """Batched encoder: [B, T] ids + mask -> ([B, D] embeddings, per-step [B, H]).

    The sentence embedding is taken from each row's final real token, via a
    mask that is 1 exactly at that step.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=ad.default_dtype())
    batch, steps = ids.shape
    hidden = params.hyper.hidden_dim
    lengths = mask.sum(axis=1).astype(int)
    if np.any(lengths < 1):
        raise ShapeError("encode_sentences: a row has no real tokens")

    last = np.zeros((batch, steps), dtype=ad.default_dtype())
    last[np.arange(batch), lengths - 1] = 1.0

    h = ad.Tensor(np.zeros((batch, hidden)))
    c = ad.Tensor(np.zeros((batch, hidden)))
    final_parts: list[ad.Tensor] = []
    step_states: list[ad.Tensor] = []
    for t in range(steps):
        x = ad.gather_rows(params["word_emb.weight"], ids[:, t])
        h, c = _lstm_step(params, "enc_lstm", x, h, c)
        step_states.append(h)
        pick = np.repeat(last[:, t:t + 1], hidden, axis=1)
        final_parts.append(ad.mul(h, ad.Tensor(pick)))
    final_h = final_parts[0]
    for part in final_parts[1:]:
        final_h = ad.add(final_h, part)
    embedding = ad.l2_normalize(_fc(params, "sent_proj", final_h))
    return embedding, step_states


def encode_sentence(token_ids, params: ModelParams
                    ) -> tuple[ad.Tensor, ad.Tensor]:
    """One sentence -> (unit embedding [D], per-word joint-space states [T, D]).

    Word states cover the interior tokens (markers excluded) and are each
    unit-normalized for attention use.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size <= 2:
        raise ShapeError("encode_sentence: need at least one token between markers")
    mask = np.ones((1, ids.size))
    embedding, step_states = encode_sentences(ids[None, :], mask, params)
    words = ad.concat(step_states[1:-1], axis=0)  # drop <start>/<end> steps
    word_embs = ad.l2_normalize(_fc(params, "sent_proj", words))
    return ad.reshape(embedding, (embedding.shape[1],)), word_embs


# ---------------------------------------------------------------------------
# shared decoder


def _initial_state(embedding: ad.Tensor, params: ModelParams
                   ) -> tuple[ad.Tensor, ad.Tensor]:
    return _fc(params, "state_h", embedding), _fc(params, "state_c", embedding)


def decode_teacher_forced_batch(embedding: ad.Tensor, targets: np.ndarray,
                                params: ModelParams) -> list[ad.Tensor]:
    """Teacher forcing over [B, T] wrapped targets; returns T-1 tensors [B, V].

    Inputs are the targets shifted right (starting at <start>); step t's
    log-softmax row scores the prediction of targets[:, t+1].
    """
    targets = np.asarray(targets, dtype=np.int64)
    if embedding.data.ndim != 2 or embedding.shape[1] != params.hyper.embed_dim:
        raise ShapeError(f"decoder expects [B, {params.hyper.embed_dim}] "
                         f"embeddings, got {embedding.shape}")
    h, c = _initial_state(embedding, params)
    out: list[ad.Tensor] = []
    for t in range(targets.shape[1] - 1):
        x = ad.gather_rows(params["word_emb.weight"], targets[:, t])
        h, c = _lstm_step(params, "dec_lstm", x, h, c)
        out.append(ad.log_softmax(_fc(params, "dec_out", h)))
    return out


def decode_teacher_forced(embedding: ad.Tensor, target_ids,
                          params: ModelParams) -> ad.Tensor:
    """Single-sequence teacher forcing -> [T, V] per-step log-probabilities."""
    ids = np.asarray(target_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 2:
        raise ShapeError("decode_teacher_forced: target must be wrapped with markers")
    if embedding.data.ndim == 1:
        embedding = ad.reshape(embedding, (1, embedding.shape[0]))
    steps = decode_teacher_forced_batch(embedding, ids[None, :], params)
    return ad.concat(steps, axis=0)


def decode_greedy(embedding: ad.Tensor, params: ModelParams,
                  max_len: int) -> list[int]:
    """Feed back the argmax token each step; stop at <end> or max_len tokens."""
    if max_len < 1:
        raise ShapeError("decode_greedy: max_len must be >= 1")
    emb = embedding
    if emb.data.ndim == 1:
        emb = ad.Tensor(emb.data[None, :])
    h, c = _initial_state(emb, params)
    token = START
    out: list[int] = []
    for _ in range(max_len):
        x = ad.gather_rows(params["word_emb.weight"], np.asarray([token]))
        h, c = _lstm_step(params, "dec_lstm", x, h, c)
        logits = _fc(params, "dec_out", h)
        token = int(np.argmax(logits.data[0]))
        if token == END:
            break
        out.append(token)
    return out


# ---------------------------------------------------------------------------
# region/word attention scoring


def attention_similarity(region_embs: np.ndarray, word_embs: np.ndarray,
                         aggregation: str = "mean") -> float:
    """Score one (image, caption) pair from unit region and word vectors.

    Per word: cosine to every region, negatives clamped to zero, rows
    rescaled by their max (rows of all zeros are left alone), then a
    temperature-9 softmax over regions weights the regions into an attended
    vector; the word's relevance is its cosine to that vector. The pair
    score aggregates relevances ("mean", or "lse" for temperature-6
    LogSumExp).
    """
    regions = np.asarray(region_embs, dtype=np.float64)
    words = np.asarray(word_embs, dtype=np.float64)
    if regions.ndim != 2 or words.ndim != 2 or regions.shape[1] != words.shape[1]:
        raise ShapeError(f"attention_similarity: bad shapes {regions.shape} "
                         f"and {words.shape}")
    weights = attention_weights(regions, words)  # [T, N], rows sum to 1
    attended = weights @ regions                 # [T, D]
    norms = np.linalg.norm(attended, axis=1)
    norms = np.where(norms > 0, norms, 1.0)
    relevance = (words * attended).sum(axis=1) / norms
    if aggregation == "mean":
        return float(relevance.mean())
    if aggregation == "lse":
        return float(np.log(np.exp(LSE_TEMPERATURE * relevance).sum())
                     / LSE_TEMPERATURE)
    raise ConfigError(f"unknown aggregation {aggregation!r}")


def attention_weights(region_embs: np.ndarray, word_embs: np.ndarray) -> np.ndarray:
    """The per-word attention weight rows, for inspection/tests."""
    regions = np.asarray(region_embs, dtype=np.float64)
    words = np.asarray(word_embs, dtype=np.float64)
    raw = words @ regions.T
    scores = np.maximum(raw, 0.0)
    peak = scores.max(axis=1, keepdims=True)
    scores = scores / np.where(peak > 0, peak, 1.0)
    shifted = ATTENTION_TEMPERATURE * scores
    shifted -= shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
