"""EMA teacher/student masked transformer over latent motion tokens.

The student reconstructs masked latent tokens (classification over the
base-layer codebook) conditioned on motion-aligned speech queries, and
exposes per-frame attention scores for semantic supervision. The teacher
is an EMA copy whose scores drive mask selection. Inference fills all
non-seed positions from four seed frames, with optional iterative
confidence decoding and greedy residual-layer refinement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, TrainingError
from .mam import MamModel, SpeechFeatures
from .numerics import (
    ParamSet,
    RngState,
    adam_step,
    cross_attention_bwd,
    cross_attention_fwd,
    feed_forward_bwd,
    feed_forward_fwd,
    init_cross_attention,
    init_feed_forward,
    init_layer_norm,
    init_linear,
    init_self_attention,
    layer_norm_bwd,
    layer_norm_fwd,
    linear_bwd,
    linear_fwd,
    self_attention_bwd,
    self_attention_fwd,
    sinusoidal_encoding,
    softmax_rows,
)
from .rvq import Codebook, LatentTokenGrid, MotionSequence, RvqModel, quantize
from .sqa import (
    AttentionMap,
    MaskSchedule,
    MaskSpec,
    attention_scores_bwd,
    attention_scores_fwd,
    init_score_params,
    schedule_at,
    score_to_probability_bwd,
    score_to_probability_fwd,
    select_mask,
    semantic_loss,
)
from .synth import SynthSample

logger = logging.getLogger(__name__)

SEED_FRAMES = 4  # raw frames of seed context = one latent token

STRATEGIES = ("attention", "random", "loss")


@dataclass
class MaskedLatent:
    """Latent tokens with masked rows replaced by the learnable mask embedding."""

    tokens: np.ndarray
    mask: MaskSpec


@dataclass
class StudentOutput:
    logits: np.ndarray             # (T_lat, entries)
    predicted_latents: np.ndarray  # (T_lat, dim) softmax-weighted base codes
    frame_scores: np.ndarray       # (T_lat,) in (0, 1)
    attention: AttentionMap


@dataclass
class TeacherState:
    params: ParamSet
    decay: float


@dataclass
class StudentConfig:
    width: int = 64
    blocks: int = 4
    heads: int = 4
    ff_mult: int = 2
    score_dim: int = 16


def init_student_params(dim: int, entries: int, d_q: int, cfg: StudentConfig,
                        rng: np.random.Generator) -> ParamSet:
    params = ParamSet()
    init_linear(params, "in", dim, cfg.width, rng)
    params.add("mask_embed", rng.normal(scale=0.1, size=(1, dim)))
    for i in range(cfg.blocks):
        init_self_attention(params, f"blk{i}.sa", cfg.width, rng)
        init_cross_attention(params, f"blk{i}.ca", cfg.width, d_q, rng)
        init_feed_forward(params, f"blk{i}.ff", cfg.width, cfg.ff_mult * cfg.width, rng)
    init_layer_norm(params, "lnf", cfg.width)
    init_linear(params, "head", cfg.width, entries, rng)
    init_score_params(params, "score", d_q, cfg.width, cfg.score_dim, rng)
    return params


def apply_mask(latents: np.ndarray, mask: MaskSpec, mask_embed: np.ndarray) -> MaskedLatent:
    tokens = latents.copy()
    if mask.count:
        tokens[mask.masked] = mask_embed[0]
    return MaskedLatent(tokens, mask)


def _student_fwd(tokens: np.ndarray, speech_q: np.ndarray, params: ParamSet,
                 cfg: StudentConfig):
    x, in_cache = linear_fwd(tokens, params["in.w"], params["in.b"])
    x = x + sinusoidal_encoding(x.shape[0], x.shape[1])
    x0 = x
    amap, score_cache = attention_scores_fwd(x0, speech_q, params, "score")
    probs, prob_cache = score_to_probability_fwd(amap.scores)
    caches = []
    for i in range(cfg.blocks):
        x, sa = self_attention_fwd(x, params, f"blk{i}.sa", cfg.heads)
        x, ca = cross_attention_fwd(x, speech_q, params, f"blk{i}.ca", cfg.heads)
        x, ff = feed_forward_fwd(x, params, f"blk{i}.ff")
        caches.append((sa, ca, ff))
    normed, lnf_cache = layer_norm_fwd(x, params["lnf.g"], params["lnf.b"])
    logits, head_cache = linear_fwd(normed, params["head.w"], params["head.b"])
    fwd_cache = (in_cache, x0, amap, score_cache, prob_cache, caches, lnf_cache,
                 head_cache, tokens, speech_q)
    return logits, amap, probs, fwd_cache


def _student_bwd(dlogits: np.ndarray, dprob_z: np.ndarray | None, params: ParamSet,
                 cfg: StudentConfig, cache):
    """Backward through the student; `dprob_z` is the gradient w.r.t. the
    standardized pre-sigmoid scores (the fused BCE-through-sigmoid form).
    Returns (d tokens, d speech queries)."""
    (in_cache, x0, amap, score_cache, prob_cache, caches, lnf_cache,
     head_cache, tokens, speech_q) = cache
    dnormed, dw, db = linear_bwd(dlogits, head_cache)
    params.accumulate("head.w", dw)
    params.accumulate("head.b", db)
    dx, dg, db = layer_norm_bwd(dnormed, lnf_cache)
    params.accumulate("lnf.g", dg)
    params.accumulate("lnf.b", db)
    dq_total = np.zeros_like(speech_q)
    for i in reversed(range(cfg.blocks)):
        sa, ca, ff = caches[i]
        dx = feed_forward_bwd(dx, params, f"blk{i}.ff", ff)
        dx, dq = cross_attention_bwd(dx, params, f"blk{i}.ca", ca)
        dq_total += dq
        dx = self_attention_bwd(dx, params, f"blk{i}.sa", sa)
    if dprob_z is not None:
        dscores = score_to_probability_bwd(dprob_z, prob_cache)
        dx0, dq_score = attention_scores_bwd(dscores, amap, score_cache, x0,
                                             speech_q, params, "score")
        dx = dx + dx0
        dq_total += dq_score
    dtokens, dw, db = linear_bwd(dx, in_cache)
    params.accumulate("in.w", dw)
    params.accumulate("in.b", db)
    return dtokens, dq_total


def student_forward(masked: MaskedLatent, speech_q: np.ndarray, params: ParamSet,
                    cfg: StudentConfig, base_codes: np.ndarray) -> StudentOutput:
    """Pure forward pass: code logits, expected latents, and frame scores."""
    if masked.tokens.shape[1] != params["in.w"].shape[0]:
        raise DimensionError(
            f"token width {masked.tokens.shape[1]} != input projection "
            f"{params['in.w'].shape[0]}")
    logits, amap, probs, _ = _student_fwd(masked.tokens, speech_q, params, cfg)
    return StudentOutput(logits, softmax_rows(logits) @ base_codes, probs, amap)


def teacher_scores(latents: np.ndarray, speech_q: np.ndarray, teacher: TeacherState,
                   cfg: StudentConfig) -> AttentionMap:
    """Attention map the teacher computes on fully visible latents."""
    x, _ = linear_fwd(latents, teacher.params["in.w"], teacher.params["in.b"])
    x = x + sinusoidal_encoding(x.shape[0], x.shape[1])
    amap, _ = attention_scores_fwd(x, speech_q, teacher.params, "score")
    return amap


@dataclass
class MmmLoss:
    cross_entropy: float
    latent_l2: float  # reporting form: sum over masked frames of ||pred - truth||^2


def mmm_loss(output: StudentOutput, targets: np.ndarray, mask: MaskSpec,
             base_codes: np.ndarray) -> MmmLoss:
    """Masked reconstruction loss.

    Training form: mean cross-entropy over masked positions. Reporting form:
    summed squared latent error between the expected predicted latents and
    the target base-code vectors, logged but never optimized.
    """
    if mask.count == 0:
        logger.warning("mmm_loss: empty mask set, returning 0")
        return MmmLoss(0.0, 0.0)
    rows = mask.masked
    probs = softmax_rows(output.logits[rows])
    picked = np.clip(probs[np.arange(len(rows)), targets[rows]], 1e-300, None)
    ce = float(-np.mean(np.log(picked)))
    diff = output.predicted_latents[rows] - base_codes[targets[rows]]
    return MmmLoss(ce, float(np.sum(diff ** 2)))


def ema_update(teacher: TeacherState, student: ParamSet,
               decay: float | None = None) -> TeacherState:
    """theta' <- decay * theta' + (1 - decay) * theta, elementwise, in place."""
    lam = teacher.decay if decay is None else decay
    if set(teacher.params.values) != set(student.values):
        raise DimensionError("teacher/student parameter names differ")
    for name, value in teacher.params.values.items():
        s = student[name]
        if s.shape != value.shape:
            raise DimensionError(f"teacher/student shape mismatch for '{name}'")
        value *= lam
        value += (1.0 - lam) * s
    return teacher


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class MaskedTrainConfig:
    student: StudentConfig = field(default_factory=StudentConfig)
    epochs: int = 40
    batch_size: int = 16
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    semantic_weight: float = 0.1
    ema_decay: float = 0.999


def _per_position_ce(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    probs = softmax_rows(logits)
    picked = np.clip(probs[np.arange(len(targets)), targets], 1e-300, None)
    return -np.log(picked)


def _strategy_scores(strategy: str, quantized: np.ndarray, speech_q: np.ndarray,
                     targets: np.ndarray, teacher: TeacherState, student: ParamSet,
                     cfg: StudentConfig) -> np.ndarray:
    if strategy == "attention":
        return teacher_scores(quantized, speech_q, teacher, cfg).scores
    if strategy == "loss":
        # first-pass reconstruction difficulty on the fully visible sequence
        logits, _, _, _ = _student_fwd(quantized, speech_q, student, cfg)
        return _per_position_ce(logits, targets)
    if strategy == "random":
        return np.zeros(quantized.shape[0])
    raise ConfigurationError(f"unknown masking strategy '{strategy}'")


def train_masked(samples: list[SynthSample], tokenizer: RvqModel, mam: MamModel,
                 schedule: MaskSchedule, config: MaskedTrainConfig, rng: RngState,
                 strategy: str = "attention") -> tuple[ParamSet, TeacherState, list[dict]]:
    """Train the student with teacher-guided masking; EMA update per step."""
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"strategy must be one of {STRATEGIES}")
    if schedule.total_epochs != config.epochs:
        raise ConfigurationError(
            f"schedule spans {schedule.total_epochs} epochs, training runs {config.epochs}")
    grids = [tokenizer.tokenize(s.motion) for s in samples]
    queries = [mam.aligned_queries(s.features) for s in samples]
    targets = [g.indices[0] for g in grids]
    base_codes = tokenizer.codebook.layers[0]

    cfg = config.student
    params = init_student_params(tokenizer.dim, tokenizer.codebook.entries,
                                 mam.d_q, cfg, rng.split(0).generator())
    teacher = TeacherState(params.copy(), config.ema_decay)
    gen = rng.split(1).generator()
    mask_rng = rng.split(2)

    curve = []
    step = 0
    for epoch in range(config.epochs):
        ratios = schedule_at(schedule, epoch)
        if strategy == "random":
            ratios = (0.0, 0.0, schedule.mask_ratio)
        order = gen.permutation(len(samples))
        epoch_ce, epoch_sem, epoch_l2 = [], [], []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            params.zero_grads()
            for seq_pos, i in enumerate(idx):
                scores = _strategy_scores(strategy, grids[i].quantized, queries[i],
                                          targets[i], teacher, params, cfg)
                mask = select_mask(scores, ratios,
                                   rng=mask_rng.split(step * len(samples) + int(i)))
                masked = apply_mask(grids[i].quantized, mask, params["mask_embed"])
                logits, amap, probs, cache = _student_fwd(masked.tokens, queries[i],
                                                          params, cfg)
                out = StudentOutput(logits, softmax_rows(logits) @ base_codes,
                                    probs, amap)
                losses = mmm_loss(out, targets[i], mask, base_codes)
                sem = semantic_loss(probs, samples[i].labels)
                if not np.isfinite(losses.cross_entropy):
                    raise TrainingError("masked-token cross-entropy diverged")
                if not np.isfinite(sem):
                    raise TrainingError("semantic BCE diverged")

                dlogits = np.zeros_like(logits)
                if mask.count:
                    rows = mask.masked
                    p = softmax_rows(logits[rows])
                    p[np.arange(len(rows)), targets[i][rows]] -= 1.0
                    dlogits[rows] = p / mask.count
                # fused BCE-through-sigmoid gradient on standardized scores
                dprob_z = config.semantic_weight * (probs - samples[i].labels) / len(probs)
                dtokens, _ = _student_bwd(dlogits, dprob_z, params, cfg, cache)
                if mask.count:
                    params.accumulate("mask_embed",
                                      dtokens[mask.masked].sum(axis=0, keepdims=True))
                epoch_ce.append(losses.cross_entropy)
                epoch_sem.append(sem)
                epoch_l2.append(losses.latent_l2)
            params.scale_grads(1.0 / len(idx))
            step += 1
            adam_step(params, config.lr, config.betas, step)
            ema_update(teacher, params)
        distance = float(np.sqrt(sum(
            np.sum((teacher.params[n] - params[n]) ** 2) for n in params.names())))
        curve.append({
            "epoch": epoch,
            "ce": float(np.mean(epoch_ce)),
            "semantic": float(np.mean(epoch_sem)),
            "latent_l2": float(np.mean(epoch_l2)),
            "soft": ratios[0], "hard": ratios[1], "random": ratios[2],
            "teacher_distance": distance,
        })
    return params, teacher, curve


def masked_token_accuracy(samples: list[SynthSample], tokenizer: RvqModel,
                          mam: MamModel, params: ParamSet, cfg: StudentConfig,
                          mask_ratio: float, rng: RngState,
                          repeats: int = 4) -> float:
    """Accuracy of argmax code prediction under uniformly random eval masks."""
    base_codes = tokenizer.codebook.layers[0]
    hits = total = 0
    for i, sample in enumerate(samples):
        grid = tokenizer.tokenize(sample.motion)
        speech_q = mam.aligned_queries(sample.features)
        target = grid.indices[0]
        for r in range(repeats):
            mask = select_mask(np.zeros(grid.tokens), (0.0, 0.0, mask_ratio),
                               rng=rng.split(i * repeats + r))
            if mask.count == 0:
                continue
            masked = apply_mask(grid.quantized, mask, params["mask_embed"])
            out = student_forward(masked, speech_q, params, cfg, base_codes)
            pred = np.argmax(out.logits[mask.masked], axis=1)
            hits += int(np.sum(pred == target[mask.masked]))
            total += mask.count
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class GenerationStack:
    """Everything inference needs: frozen tokenizer, alignment module, student."""

    tokenizer: RvqModel
    mam: MamModel
    student: ParamSet
    student_cfg: StudentConfig

    @property
    def clip_frames(self) -> int:
        return self.mam.n_q * SEED_FRAMES


def refine_residual_layers(base_index: int, target: np.ndarray,
                           codebook: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Greedy per-layer nearest-neighbor completion of layers 2..L toward `target`.

    Returns the per-layer indices (layer 1 fixed to `base_index`) and the
    summed code vector.
    """
    indices = np.zeros(codebook.n_layers, dtype=np.int64)
    indices[0] = base_index
    total = codebook.layers[0][base_index].copy()
    for layer in range(1, codebook.n_layers):
        residual = (target - total)[None, :]
        grid = quantize(residual, Codebook([codebook.layers[layer]]), 1)
        indices[layer] = grid.indices[0, 0]
        total += grid.quantized[0]
    return indices, total


def _predict_tokens(stack: GenerationStack, speech_q: np.ndarray,
                    grid: LatentTokenGrid, known: np.ndarray,
                    steps: int) -> LatentTokenGrid:
    """Iteratively fill unknown token rows; returns a completed grid."""
    base_codes = stack.tokenizer.codebook.layers[0]
    values = grid.quantized.copy()
    indices = grid.indices.copy()
    known = known.copy()
    unknown_start = int(np.sum(~known))
    if unknown_start == 0:
        return LatentTokenGrid(indices, values)
    for s in range(1, steps + 1):
        tokens = values.copy()
        tokens[~known] = stack.student["mask_embed"][0]
        logits, _, _, _ = _student_fwd(tokens, speech_q, stack.student, stack.student_cfg)
        probs = softmax_rows(logits)
        pred_idx = np.argmax(logits, axis=1)
        confidence = probs[np.arange(len(pred_idx)), pred_idx]
        want = int(np.ceil(unknown_start * s / steps)) - (unknown_start - int(np.sum(~known)))
        if want <= 0:
            continue
        candidates = np.flatnonzero(~known)
        ranked = candidates[np.argsort(-confidence[candidates], kind="stable")][:want]
        expected = probs[ranked] @ base_codes
        for row, i in enumerate(ranked):
            indices[:, i], values[i] = refine_residual_layers(
                int(pred_idx[i]), expected[row], stack.tokenizer.codebook)
            known[i] = True
    return LatentTokenGrid(indices, values)


def infer(features: SpeechFeatures, seed_frames: np.ndarray, stack: GenerationStack,
          steps: int = 1) -> MotionSequence:
    """Generate one clip from four seed frames and speech features.

    All latent positions start masked except the seed token; `steps` > 1
    enables iterative confidence decoding. Deterministic given its inputs.
    """
    seed_frames = np.asarray(seed_frames, dtype=np.float64)
    if seed_frames.shape[0] != SEED_FRAMES:
        raise DimensionError(
            f"seed must be exactly {SEED_FRAMES} frames, got {seed_frames.shape[0]}")
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    tokenizer = stack.tokenizer
    t_lat = stack.mam.n_q
    seed_motion = MotionSequence(seed_frames, tokenizer.layout, tokenizer.fps)
    seed_grid = tokenizer.tokenize(seed_motion)

    layers = tokenizer.codebook.n_layers
    start = LatentTokenGrid(np.zeros((layers, t_lat), dtype=np.int64),
                            np.zeros((t_lat, tokenizer.dim)))
    known = np.zeros(t_lat, dtype=bool)
    start.indices[:, 0] = seed_grid.indices[:, 0]
    start.quantized[0] = seed_grid.quantized[0]
    known[0] = True

    speech_q = stack.mam.aligned_queries(features)
    grid = _predict_tokens(stack, speech_q, start, known, steps)
    return tokenizer.decode(grid)


def reconstruct_through_student(motion: MotionSequence, features: SpeechFeatures,
                                stack: GenerationStack) -> MotionSequence:
    """Degenerate fully seeded path: every token visible, so the student is
    bypassed and the output equals the tokenizer round-trip exactly."""
    grid = stack.tokenizer.tokenize(motion)
    known = np.ones(grid.tokens, dtype=bool)
    speech_q = stack.mam.aligned_queries(features)
    filled = _predict_tokens(stack, speech_q, grid, known, steps=1)
    return stack.tokenizer.decode(filled, out_frames=motion.num_frames)


def infer_long(features: SpeechFeatures, seed_frames: np.ndarray,
               stack: GenerationStack, total_frames: int,
               steps: int = 1) -> MotionSequence:
    """Sliding-clip generation: each clip's last four frames seed the next.

    Clips are concatenated with the four-frame overlap counted once, so the
    junction frames are bit-identical to the seeds that produced them.
    """
    clip = stack.clip_frames
    if total_frames < clip:
        raise ConfigurationError(
            f"total_frames {total_frames} shorter than one clip ({clip}); use infer")
    if features.length < total_frames:
        raise DimensionError(
            f"feature stream covers {features.length} frames < {total_frames}")
    pieces = []
    seed = np.asarray(seed_frames, dtype=np.float64)
    start = 0
    produced = 0
    while produced < total_frames:
        window = SpeechFeatures(features.low[start:start + clip],
                                features.high[start:start + clip])
        out = infer(window, seed, stack, steps)
        fresh = out.frames if not pieces else out.frames[SEED_FRAMES:]
        pieces.append(fresh)
        produced += fresh.shape[0]
        whole = np.concatenate(pieces)
        seed = whole[-SEED_FRAMES:]
        start += clip - SEED_FRAMES
    frames = np.concatenate(pieces)[:total_frames]
    return MotionSequence(frames, stack.tokenizer.layout, stack.tokenizer.fps)
