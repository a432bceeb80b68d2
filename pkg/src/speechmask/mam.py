"""Motion-audio joint embedding.

Learnable speech queries are refined by two cross-attention stages (local
acoustic track first, then the wide-context track), co-embedded with
quantized motion latents through one weight-shared transformer stack, and
trained with symmetric InfoNCE at the frame and sentence levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, TrainingError
from .numerics import (
    ParamSet,
    RngState,
    adam_step,
    cross_attention_bwd,
    cross_attention_fwd,
    init_cross_attention,
    init_linear,
    init_transformer_block,
    linear_bwd,
    linear_fwd,
    sinusoidal_encoding,
    softmax_rows,
    transformer_block_bwd,
    transformer_block_fwd,
)


@dataclass
class SpeechFeatures:
    """Paired low-level/high-level feature tracks for one utterance."""

    low: np.ndarray   # (T_a, d_low)
    high: np.ndarray  # (T_a, d_high)

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=np.float64)
        self.high = np.asarray(self.high, dtype=np.float64)
        if self.low.ndim != 2 or self.high.ndim != 2:
            raise DimensionError("feature tracks must be 2-D")
        if self.low.shape[0] != self.high.shape[0]:
            raise DimensionError(
                f"track lengths differ: {self.low.shape[0]} vs {self.high.shape[0]}")
        if not (np.all(np.isfinite(self.low)) and np.all(np.isfinite(self.high))):
            raise DimensionError("feature tracks contain NaN/Inf")

    @property
    def length(self) -> int:
        return self.low.shape[0]


@dataclass
class JointEmbedding:
    """Shared-transformer outputs for both modalities plus pooled vectors."""

    speech: np.ndarray         # (n_q, d_q)
    motion: np.ndarray         # (T_lat, d_q)
    pooled_speech: np.ndarray  # (d_q,)
    pooled_motion: np.ndarray  # (d_q,)


def resample_track(track: np.ndarray, length: int) -> np.ndarray:
    """Linear interpolation of each column onto `length` evenly spaced rows."""
    if track.shape[0] == length:
        return track.copy()
    src = np.linspace(0.0, 1.0, track.shape[0])
    dst = np.linspace(0.0, 1.0, length)
    return np.stack([np.interp(dst, src, track[:, c]) for c in range(track.shape[1])], axis=1)


def init_mam_params(n_q: int, d_q: int, d_low: int, d_high: int, motion_dim: int,
                    heads: int, shared_blocks: int, ff_mult: int,
                    rng: np.random.Generator) -> ParamSet:
    params = ParamSet()
    params.add("q0", rng.normal(scale=0.5, size=(n_q, d_q)))
    init_linear(params, "plow", d_low, d_q, rng)
    init_linear(params, "phigh", d_high, d_q, rng)
    init_cross_attention(params, "ca1", d_q, d_q, rng)
    init_transformer_block(params, "tb1", d_q, ff_mult * d_q, rng)
    init_cross_attention(params, "ca2", d_q, d_q, rng)
    init_transformer_block(params, "tb2", d_q, ff_mult * d_q, rng)
    init_linear(params, "mproj", motion_dim, d_q, rng)
    for i in range(shared_blocks):
        init_transformer_block(params, f"shared.{i}", d_q, ff_mult * d_q, rng)
    return params


def _encode_queries_fwd(features: SpeechFeatures, params: ParamSet, n_q: int, heads: int):
    low = resample_track(features.low, n_q)
    high = resample_track(features.high, n_q)
    pl, cl = linear_fwd(low, params["plow.w"], params["plow.b"])
    ph, ch = linear_fwd(high, params["phigh.w"], params["phigh.b"])
    x, ca1 = cross_attention_fwd(params["q0"], pl, params, "ca1", heads)
    x, tb1 = transformer_block_fwd(x, params, "tb1", heads)
    x, ca2 = cross_attention_fwd(x, ph, params, "ca2", heads)
    x, tb2 = transformer_block_fwd(x, params, "tb2", heads)
    return x, (cl, ch, ca1, tb1, ca2, tb2)


def _encode_queries_bwd(dx: np.ndarray, params: ParamSet, cache, heads: int) -> None:
    cl, ch, ca1, tb1, ca2, tb2 = cache
    dx = transformer_block_bwd(dx, params, "tb2", tb2)
    dx, dph = cross_attention_bwd(dx, params, "ca2", ca2)
    dx = transformer_block_bwd(dx, params, "tb1", tb1)
    dx, dpl = cross_attention_bwd(dx, params, "ca1", ca1)
    params.accumulate("q0", dx)
    _, dw, db = linear_bwd(dpl, cl)
    params.accumulate("plow.w", dw)
    params.accumulate("plow.b", db)
    _, dw, db = linear_bwd(dph, ch)
    params.accumulate("phigh.w", dw)
    params.accumulate("phigh.b", db)


def _shared_fwd(x: np.ndarray, params: ParamSet, blocks: int, heads: int):
    caches = []
    for i in range(blocks):
        x, cache = transformer_block_fwd(x, params, f"shared.{i}", heads)
        caches.append(cache)
    return x, caches


def _shared_bwd(dx: np.ndarray, params: ParamSet, caches, heads: int) -> np.ndarray:
    for i in reversed(range(len(caches))):
        dx = transformer_block_bwd(dx, params, f"shared.{i}", caches[i])
    return dx


@dataclass
class MamModel:
    """Trained alignment module; all inference paths are pure."""

    params: ParamSet
    n_q: int
    d_q: int
    heads: int
    shared_blocks: int

    def encode_queries(self, features: SpeechFeatures) -> np.ndarray:
        """Hierarchically refined speech queries, one per latent motion frame."""
        refined, _ = _encode_queries_fwd(features, self.params, self.n_q, self.heads)
        return refined

    def aligned_queries(self, features: SpeechFeatures) -> np.ndarray:
        """Motion-aligned speech features: refined queries after the shared stack."""
        refined, _ = _encode_queries_fwd(features, self.params, self.n_q, self.heads)
        out, _ = _shared_fwd(refined, self.params, self.shared_blocks, self.heads)
        return out

    def joint_embed(self, refined_queries: np.ndarray, motion_latents: np.ndarray) -> JointEmbedding:
        """Run both tracks through the shared transformer (same parameter storage).

        The motion track gets sinusoidal position marks (queries carry learned
        per-position identity already).
        """
        zq, _ = linear_fwd(motion_latents, self.params["mproj.w"], self.params["mproj.b"])
        zq = zq + sinusoidal_encoding(zq.shape[0], zq.shape[1])
        speech, _ = _shared_fwd(refined_queries, self.params, self.shared_blocks, self.heads)
        motion, _ = _shared_fwd(zq, self.params, self.shared_blocks, self.heads)
        return JointEmbedding(speech, motion, speech.mean(axis=0), motion.mean(axis=0))


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------

def _normalize_rows_fwd(x: np.ndarray):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DimensionError("cannot cosine-normalize a zero row")
    return x / norms, (x, norms)


def _normalize_rows_bwd(du: np.ndarray, cache) -> np.ndarray:
    x, norms = cache
    u = x / norms
    return (du - u * np.sum(du * u, axis=1, keepdims=True)) / norms


def _info_nce_one_direction_fwd(a: np.ndarray, b: np.ndarray, tau: float):
    ua, ca = _normalize_rows_fwd(a)
    ub, cb = _normalize_rows_fwd(b)
    logits = ua @ ub.T / tau
    probs = softmax_rows(logits)
    diag = np.clip(np.diag(probs), 1e-300, None)
    loss = float(-np.sum(np.log(diag)))
    return loss, (ua, ub, probs, ca, cb, tau)


def _info_nce_one_direction_bwd(cache):
    ua, ub, probs, ca, cb, tau = cache
    dlogits = probs - np.eye(probs.shape[0])
    dua = dlogits @ ub / tau
    dub = dlogits.T @ ua / tau
    return _normalize_rows_bwd(dua, ca), _normalize_rows_bwd(dub, cb)


def info_nce(a: np.ndarray, b: np.ndarray, tau: float = 0.07,
             symmetric: bool = True) -> float:
    """Contrastive loss over paired rows; cosine similarity, temperature `tau`.

    Positives sit on the diagonal of the similarity matrix. The symmetric
    variant averages the two directions; either way a batch of one pair
    scores exactly zero.
    """
    loss, _ = info_nce_with_grads(a, b, tau, symmetric)
    return loss


def info_nce_with_grads(a: np.ndarray, b: np.ndarray, tau: float = 0.07,
                        symmetric: bool = True):
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    if a.shape != b.shape:
        raise DimensionError(f"paired embeddings differ in shape: {a.shape} vs {b.shape}")
    loss_ab, cache_ab = _info_nce_one_direction_fwd(a, b, tau)
    da, db = _info_nce_one_direction_bwd(cache_ab)
    if not symmetric:
        return loss_ab, (da, db)
    loss_ba, cache_ba = _info_nce_one_direction_fwd(b, a, tau)
    db2, da2 = _info_nce_one_direction_bwd(cache_ba)
    loss = 0.5 * (loss_ab + loss_ba)
    return loss, (0.5 * (da + da2), 0.5 * (db + db2))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class MamTrainConfig:
    d_q: int = 32
    heads: int = 2
    shared_blocks: int = 2
    ff_mult: int = 2
    temperature: float = 0.07
    epochs: int = 20
    batch_size: int = 8
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)


def _mam_sequence_fwd(features: SpeechFeatures, latents: np.ndarray, params: ParamSet,
                      n_q: int, heads: int, blocks: int):
    refined, enc_cache = _encode_queries_fwd(features, params, n_q, heads)
    zq, zc = linear_fwd(latents, params["mproj.w"], params["mproj.b"])
    zq = zq + sinusoidal_encoding(zq.shape[0], zq.shape[1])
    speech, s_caches = _shared_fwd(refined, params, blocks, heads)
    motion, m_caches = _shared_fwd(zq, params, blocks, heads)
    return speech, motion, (enc_cache, zc, s_caches, m_caches)


def _mam_sequence_bwd(dspeech: np.ndarray, dmotion: np.ndarray, params: ParamSet,
                      cache, heads: int) -> None:
    enc_cache, zc, s_caches, m_caches = cache
    drefined = _shared_bwd(dspeech, params, s_caches, heads)
    dzq = _shared_bwd(dmotion, params, m_caches, heads)
    _, dw, db = linear_bwd(dzq, zc)
    params.accumulate("mproj.w", dw)
    params.accumulate("mproj.b", db)
    _encode_queries_bwd(drefined, params, enc_cache, heads)


def train_mam(samples: list, tokenizer, config: MamTrainConfig,
              rng: RngState) -> tuple[MamModel, list[dict]]:
    """Train the alignment module against a frozen tokenizer.

    `samples` carry `.features` and `.motion`; motion is tokenized once up
    front. Loss per batch: mean frame-level InfoNCE within each sequence
    plus sentence-level InfoNCE across the batch, both symmetric.
    """
    if not samples:
        raise ConfigurationError("empty training corpus")
    latents = [tokenizer.tokenize(s.motion).quantized for s in samples]
    n_q = latents[0].shape[0]
    params = init_mam_params(n_q, config.d_q, samples[0].features.low.shape[1],
                             samples[0].features.high.shape[1], tokenizer.dim,
                             config.heads, config.shared_blocks, config.ff_mult,
                             rng.split(0).generator())
    gen = rng.split(1).generator()
    curve = []
    step = 0
    for epoch in range(config.epochs):
        order = gen.permutation(len(samples))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            params.zero_grads()
            outs = []
            frame_loss_total = 0.0
            for i in idx:
                speech, motion, cache = _mam_sequence_fwd(
                    samples[i].features, latents[i], params, n_q,
                    config.heads, config.shared_blocks)
                floss, (dsp, dmo) = info_nce_with_grads(speech, motion, config.temperature)
                frame_loss_total += floss
                outs.append((speech, motion, cache, dsp, dmo))

            n = len(idx)
            pooled_speech = np.stack([o[0].mean(axis=0) for o in outs])
            pooled_motion = np.stack([o[1].mean(axis=0) for o in outs])
            sent_loss, (dps, dpm) = info_nce_with_grads(pooled_speech, pooled_motion,
                                                        config.temperature)
            loss = frame_loss_total / n + sent_loss
            if not np.isfinite(loss):
                raise TrainingError(f"alignment loss diverged at epoch {epoch}")
            for j, (speech, motion, cache, dsp, dmo) in enumerate(outs):
                dspeech = dsp / n + dps[j][None, :] / speech.shape[0]
                dmotion = dmo / n + dpm[j][None, :] / motion.shape[0]
                _mam_sequence_bwd(dspeech, dmotion, params, cache, config.heads)
            step += 1
            adam_step(params, config.lr, config.betas, step)
            epoch_losses.append(loss)
        curve.append({"epoch": epoch, "loss": float(np.mean(epoch_losses))})

    model = MamModel(params, n_q, config.d_q, config.heads, config.shared_blocks)
    return model, curve


def alignment_diagnostics(model: MamModel, samples: list, tokenizer,
                          tau: float = 0.07) -> dict:
    """Positive-pair cosine similarity and batch retrieval accuracy."""
    pooled_s, pooled_m = [], []
    for s in samples:
        refined = model.encode_queries(s.features)
        emb = model.joint_embed(refined, tokenizer.tokenize(s.motion).quantized)
        pooled_s.append(emb.pooled_speech)
        pooled_m.append(emb.pooled_motion)
    S = np.stack(pooled_s)
    M = np.stack(pooled_m)
    S = S / np.linalg.norm(S, axis=1, keepdims=True)
    M = M / np.linalg.norm(M, axis=1, keepdims=True)
    sims = S @ M.T
    positive = float(np.mean(np.diag(sims)))
    top1 = float(np.mean(np.argmax(sims, axis=1) == np.arange(len(samples))))
    matched = info_nce(S, M, tau)
    return {"positive_cosine": positive, "retrieval_top1": top1, "matched_loss": matched}
