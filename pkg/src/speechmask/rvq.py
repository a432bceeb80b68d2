"""Residual-vector-quantized motion autoencoder.

A strided temporal conv encoder downsamples motion 4x in time, a stack of
residual codebooks quantizes the latents (nearest neighbor per layer, ties
to the lowest index, index 0 frozen at zero in every layer), and four
part-wise decoder heads reconstruct the face/hands/upper/lower channel
groups. Codebooks train by exponential moving average of assigned latents
with quantizer dropout and dead-code reseeding; encoder/decoder train by
explicit backprop with a straight-through estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, TrainingError
from .numerics import ParamSet, RngState, adam_step, ensure_finite, gelu_bwd, gelu_fwd

PART_NAMES = ("face", "hands", "upper", "lower")

DOWNSCALE = 4  # temporal factor between raw frames and latent tokens


@dataclass(frozen=True)
class PartLayout:
    """Contiguous channel ranges for the four body-part groups."""

    face: tuple[int, int]
    hands: tuple[int, int]
    upper: tuple[int, int]
    lower: tuple[int, int]

    def __post_init__(self):
        spans = [getattr(self, p) for p in PART_NAMES]
        cursor = 0
        for name, (lo, hi) in zip(PART_NAMES, spans):
            if lo != cursor or hi <= lo:
                raise ConfigurationError(
                    f"part ranges must be contiguous, nonempty and ordered "
                    f"face/hands/upper/lower; '{name}' is ({lo}, {hi}) at offset {cursor}")
            cursor = hi

    @classmethod
    def from_sizes(cls, face: int, hands: int, upper: int, lower: int) -> "PartLayout":
        edges = np.cumsum([0, face, hands, upper, lower])
        return cls(*((int(edges[i]), int(edges[i + 1])) for i in range(4)))

    @property
    def channels(self) -> int:
        return self.lower[1]

    def slice_of(self, part: str) -> slice:
        lo, hi = getattr(self, part)
        return slice(lo, hi)


@dataclass
class MotionSequence:
    """T x D frame matrix partitioned into face/hands/upper/lower channels."""

    frames: np.ndarray
    layout: PartLayout
    fps: float = 30.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise DimensionError(f"motion frames must be 2-D, got {self.frames.shape}")
        if self.frames.shape[0] < DOWNSCALE:
            raise DimensionError(
                f"sequence too short: {self.frames.shape[0]} frames < {DOWNSCALE}")
        if self.frames.shape[1] != self.layout.channels:
            raise DimensionError(
                f"{self.frames.shape[1]} channels != layout width {self.layout.channels}")
        if not np.all(np.isfinite(self.frames)):
            raise DimensionError("motion frames contain NaN/Inf")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def part(self, name: str) -> np.ndarray:
        return self.frames[:, self.layout.slice_of(name)]


@dataclass
class Codebook:
    """Stack of residual code tables; index 0 of every layer is a frozen zero."""

    layers: list[np.ndarray]

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("codebook has no layers")
        dim = self.layers[0].shape[1]
        for i, table in enumerate(self.layers):
            if table.ndim != 2 or table.shape[0] < 1 or table.shape[1] != dim:
                raise ConfigurationError(f"codebook layer {i} malformed: {table.shape}")
            if not np.all(np.isfinite(table)):
                raise ConfigurationError(f"codebook layer {i} contains NaN/Inf")

    @classmethod
    def init(cls, n_layers: int, entries: int, dim: int, rng: np.random.Generator,
             scale: float = 0.1) -> "Codebook":
        layers = []
        for _ in range(n_layers):
            table = rng.normal(scale=scale, size=(entries, dim))
            table[0] = 0.0
            layers.append(table)
        return cls(layers)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def entries(self) -> int:
        return self.layers[0].shape[0]

    @property
    def dim(self) -> int:
        return self.layers[0].shape[1]


@dataclass
class LatentTokenGrid:
    """Per-layer code indices plus the summed quantized latents."""

    indices: np.ndarray   # (active_layers, T_lat) int64
    quantized: np.ndarray  # (T_lat, dim)

    @property
    def tokens(self) -> int:
        return self.quantized.shape[0]

    @property
    def active_layers(self) -> int:
        return self.indices.shape[0]


def _nearest_codes(residual: np.ndarray, table: np.ndarray) -> np.ndarray:
    # exact squared distances; argmin breaks ties at the lowest index
    diff = residual[:, None, :] - table[None, :, :]
    return np.argmin(np.einsum("tec,tec->te", diff, diff), axis=1)


def quantize(latent: np.ndarray, codebook: Codebook, active_layers: int,
             _collect_residuals: list | None = None) -> LatentTokenGrid:
    """Residually quantize each latent row through `active_layers` tables."""
    if not 1 <= active_layers <= codebook.n_layers:
        raise ConfigurationError(
            f"active_layers {active_layers} outside [1, {codebook.n_layers}]")
    if latent.shape[1] != codebook.dim:
        raise DimensionError(f"latent width {latent.shape[1]} != codebook dim {codebook.dim}")
    residual = np.asarray(latent, dtype=np.float64).copy()
    total = np.zeros_like(residual)
    rows = []
    for layer in range(active_layers):
        if _collect_residuals is not None:
            _collect_residuals.append(residual.copy())
        idx = _nearest_codes(residual, codebook.layers[layer])
        chosen = codebook.layers[layer][idx]
        total += chosen
        residual -= chosen
        rows.append(idx)
    return LatentTokenGrid(np.stack(rows).astype(np.int64), total)


# ---------------------------------------------------------------------------
# temporal convolutions (im2col over the time axis)
# ---------------------------------------------------------------------------

def _conv1d_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray, kernel: int,
                stride: int, pad: int):
    x_pad = np.pad(x, ((pad, pad), (0, 0)))
    t_out = (x.shape[0] + 2 * pad - kernel) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x_pad, kernel, axis=0)
    cols = windows[::stride][:t_out].transpose(0, 2, 1).reshape(t_out, kernel * x.shape[1])
    y = cols @ w + b
    return y, (cols, w, x.shape, kernel, stride, pad)


def _conv1d_bwd(dy: np.ndarray, cache):
    cols, w, x_shape, kernel, stride, pad = cache
    dw = cols.T @ dy
    db = dy.sum(axis=0, keepdims=True)
    dcols = dy @ w.T
    dx_pad = np.zeros((x_shape[0] + 2 * pad, x_shape[1]))
    for i in range(dy.shape[0]):
        dx_pad[i * stride:i * stride + kernel] += dcols[i].reshape(kernel, x_shape[1])
    dx = dx_pad[pad:pad + x_shape[0]] if pad else dx_pad
    return dx, dw, db


def _upsample2_fwd(x: np.ndarray) -> np.ndarray:
    return np.repeat(x, 2, axis=0)


def _upsample2_bwd(dy: np.ndarray) -> np.ndarray:
    return dy[0::2] + dy[1::2]


def init_autoencoder_params(channels: int, hidden: int, dim: int,
                            layout: PartLayout, rng: np.random.Generator) -> ParamSet:
    params = ParamSet()

    def conv_init(name, c_in, c_out, kernel):
        fan = kernel * c_in
        params.add(f"{name}.w", rng.normal(scale=1.0 / np.sqrt(fan), size=(fan, c_out)))
        params.add(f"{name}.b", np.zeros((1, c_out)))

    conv_init("enc.c1", channels, hidden, 4)
    conv_init("enc.c2", hidden, dim, 4)
    for part in PART_NAMES:
        width = layout.slice_of(part).stop - layout.slice_of(part).start
        conv_init(f"dec.{part}.c1", dim, hidden, 3)
        conv_init(f"dec.{part}.c2", hidden, width, 3)
    return params


def _encode_fwd(frames: np.ndarray, params: ParamSet):
    h, c1 = _conv1d_fwd(frames, params["enc.c1.w"], params["enc.c1.b"], 4, 2, 1)
    a, ca = gelu_fwd(h)
    latent, c2 = _conv1d_fwd(a, params["enc.c2.w"], params["enc.c2.b"], 4, 2, 1)
    return latent, (c1, ca, c2)


def _encode_bwd(dlatent: np.ndarray, params: ParamSet, cache):
    c1, ca, c2 = cache
    da, dw2, db2 = _conv1d_bwd(dlatent, c2)
    params.accumulate("enc.c2.w", dw2)
    params.accumulate("enc.c2.b", db2)
    dh = gelu_bwd(da, ca)
    dx, dw1, db1 = _conv1d_bwd(dh, c1)
    params.accumulate("enc.c1.w", dw1)
    params.accumulate("enc.c1.b", db1)
    return dx


def _decode_fwd(quantized: np.ndarray, params: ParamSet, layout: PartLayout):
    out = np.empty((quantized.shape[0] * DOWNSCALE, layout.channels))
    caches = {}
    for part in PART_NAMES:
        u1 = _upsample2_fwd(quantized)
        h, c1 = _conv1d_fwd(u1, params[f"dec.{part}.c1.w"], params[f"dec.{part}.c1.b"], 3, 1, 1)
        a, ca = gelu_fwd(h)
        u2 = _upsample2_fwd(a)
        y, c2 = _conv1d_fwd(u2, params[f"dec.{part}.c2.w"], params[f"dec.{part}.c2.b"], 3, 1, 1)
        out[:, layout.slice_of(part)] = y
        caches[part] = (c1, ca, c2)
    return out, caches


def _decode_bwd(dout: np.ndarray, params: ParamSet, layout: PartLayout, caches):
    dquant = None
    for part in PART_NAMES:
        c1, ca, c2 = caches[part]
        du2, dw2, db2 = _conv1d_bwd(dout[:, layout.slice_of(part)], c2)
        params.accumulate(f"dec.{part}.c2.w", dw2)
        params.accumulate(f"dec.{part}.c2.b", db2)
        da = _upsample2_bwd(du2)
        dh = gelu_bwd(da, ca)
        du1, dw1, db1 = _conv1d_bwd(dh, c1)
        params.accumulate(f"dec.{part}.c1.w", dw1)
        params.accumulate(f"dec.{part}.c1.b", db1)
        dq = _upsample2_bwd(du1)
        dquant = dq if dquant is None else dquant + dq
    return dquant


def _pad_to_downscale(frames: np.ndarray) -> np.ndarray:
    remainder = frames.shape[0] % DOWNSCALE
    if remainder == 0:
        return frames
    # right-pad by edge replication, cropped again after decode
    extra = DOWNSCALE - remainder
    return np.concatenate([frames, np.repeat(frames[-1:], extra, axis=0)])


@dataclass
class RvqModel:
    """Trained tokenizer bundle: conv autoencoder parameters plus codebooks."""

    params: ParamSet
    codebook: Codebook
    layout: PartLayout
    hidden: int
    fps: float = 30.0

    @property
    def dim(self) -> int:
        return self.codebook.dim

    def encode(self, motion: MotionSequence) -> np.ndarray:
        """Map T frames to T/4 latent rows (edge-pad first if T % 4 != 0)."""
        frames = _pad_to_downscale(motion.frames)
        latent, _ = _encode_fwd(frames, self.params)
        return ensure_finite(latent, "encoder output")

    def tokenize(self, motion: MotionSequence, active_layers: int | None = None) -> LatentTokenGrid:
        layers = active_layers if active_layers is not None else self.codebook.n_layers
        return quantize(self.encode(motion), self.codebook, layers)

    def decode(self, grid: LatentTokenGrid, out_frames: int | None = None) -> MotionSequence:
        frames, _ = _decode_fwd(grid.quantized, self.params, self.layout)
        if out_frames is not None:
            if out_frames > frames.shape[0]:
                raise DimensionError(
                    f"cannot crop {frames.shape[0]} decoded frames to {out_frames}")
            frames = frames[:out_frames]
        return MotionSequence(frames, self.layout, self.fps)

    def reconstruct(self, motion: MotionSequence, active_layers: int | None = None) -> MotionSequence:
        grid = self.tokenize(motion, active_layers)
        return self.decode(grid, out_frames=motion.num_frames)


def mean_predictor_mse(train: list[MotionSequence], held_out: list[MotionSequence]) -> float:
    """Baseline: per-channel train mean predicts every frame."""
    mean = np.concatenate([m.frames for m in train]).mean(axis=0)
    errs = [np.mean((m.frames - mean) ** 2) for m in held_out]
    return float(np.mean(errs))


def reconstruction_mse(model: RvqModel, corpus: list[MotionSequence],
                       active_layers: int | None = None) -> float:
    errs = [np.mean((model.reconstruct(m, active_layers).frames - m.frames) ** 2)
            for m in corpus]
    return float(np.mean(errs))


@dataclass
class RvqTrainConfig:
    dim: int = 32
    hidden: int = 48
    entries: int = 64
    layers: int = 6
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    commitment_weight: float = 0.25
    codebook_decay: float = 0.99
    quantizer_dropout: float = 0.2
    dead_code_batches: int = 32
    code_init_scale: float = 0.1


def train_rvq(corpus: list[MotionSequence], config: RvqTrainConfig,
              rng: RngState) -> tuple[RvqModel, list[dict]]:
    """Train the tokenizer; returns the frozen model and a per-epoch loss curve."""
    if not corpus:
        raise ConfigurationError("empty training corpus")
    layout = corpus[0].layout
    init_gen = rng.split(0).generator()
    params = init_autoencoder_params(layout.channels, config.hidden, config.dim,
                                     layout, init_gen)
    codebook = Codebook.init(config.layers, config.entries, config.dim, init_gen,
                             scale=config.code_init_scale)

    ema_counts = [np.ones(config.entries) for _ in range(config.layers)]
    ema_sums = [codebook.layers[i].copy() for i in range(config.layers)]
    unused = [np.zeros(config.entries, dtype=np.int64) for _ in range(config.layers)]

    curve = []
    step = 0
    train_gen = rng.split(1).generator()
    for epoch in range(config.epochs):
        order = train_gen.permutation(len(corpus))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [corpus[i] for i in order[start:start + config.batch_size]]
            if train_gen.random() < config.quantizer_dropout:
                active = int(train_gen.integers(1, config.layers + 1))
            else:
                active = config.layers

            params.zero_grads()
            batch_loss = batch_recon = batch_commit = 0.0
            assigned: list[list[tuple[np.ndarray, np.ndarray]]] = [[] for _ in range(config.layers)]
            for motion in batch:
                frames = _pad_to_downscale(motion.frames)
                latent, enc_cache = _encode_fwd(frames, params)
                residuals: list[np.ndarray] = []
                grid = quantize(latent, codebook, active, _collect_residuals=residuals)
                for layer in range(active):
                    assigned[layer].append((grid.indices[layer], residuals[layer]))

                recon, dec_cache = _decode_fwd(grid.quantized, params, layout)
                diff = recon - frames
                recon_loss = float(np.mean(diff ** 2))
                commit_diff = latent - grid.quantized
                commit_loss = config.commitment_weight * float(np.mean(commit_diff ** 2))

                drecon = 2.0 * diff / diff.size
                dquant = _decode_bwd(drecon, params, layout, dec_cache)
                # straight-through: decoder gradient passes to the encoder latent
                dlatent = dquant + 2.0 * config.commitment_weight * commit_diff / commit_diff.size
                _encode_bwd(dlatent, params, enc_cache)

                batch_loss += recon_loss + commit_loss
                batch_recon += recon_loss
                batch_commit += commit_loss

            n = len(batch)
            params.scale_grads(1.0 / n)
            if not np.isfinite(batch_loss):
                raise TrainingError(f"RVQ loss diverged at epoch {epoch}")
            step += 1
            adam_step(params, config.lr, config.betas, step)
            _ema_codebook_update(codebook, assigned, ema_counts, ema_sums, unused,
                                 config, train_gen, active)
            epoch_losses.append((batch_loss / n, batch_recon / n, batch_commit / n))

        loss, recon, commit = (float(np.mean([e[i] for e in epoch_losses])) for i in range(3))
        curve.append({"epoch": epoch, "loss": loss, "recon": recon, "commit": commit})

    model = RvqModel(params, codebook, layout, config.hidden, corpus[0].fps)
    return model, curve


def _ema_codebook_update(codebook: Codebook, assigned, ema_counts, ema_sums, unused,
                         config: RvqTrainConfig, gen: np.random.Generator,
                         active: int) -> None:
    decay = config.codebook_decay
    for layer in range(active):
        if not assigned[layer]:
            continue
        idx = np.concatenate([a[0] for a in assigned[layer]])
        vecs = np.concatenate([a[1] for a in assigned[layer]])
        counts = np.bincount(idx, minlength=config.entries).astype(np.float64)
        sums = np.zeros((config.entries, config.dim))
        np.add.at(sums, idx, vecs)

        ema_counts[layer][...] = decay * ema_counts[layer] + (1 - decay) * counts
        ema_sums[layer][...] = decay * ema_sums[layer] + (1 - decay) * sums
        total = ema_counts[layer].sum()
        smoothed = (ema_counts[layer] + 1e-5) / (total + config.entries * 1e-5) * total
        codebook.layers[layer][1:] = ema_sums[layer][1:] / smoothed[1:, None]

        used = counts > 0
        unused[layer][used] = 0
        unused[layer][~used] += 1
        dead = np.flatnonzero(unused[layer][1:] >= config.dead_code_batches) + 1
        for j in dead:
            seed_vec = vecs[int(gen.integers(0, vecs.shape[0]))]
            codebook.layers[layer][j] = seed_vec
            ema_counts[layer][j] = 1.0
            ema_sums[layer][j] = seed_vec
            unused[layer][j] = 0
