"""Desk-scale evaluation metrics.

Diversity (mean pairwise L1), beat consistency (Gaussian kernel between
audio beats and local minima of aggregate joint speed), face-channel MSE
and L1, and a Fréchet distance over mean-pooled frozen-encoder embeddings.
Absolute values are not comparable to any published table that used a
different embedding network; orderings between systems under the same
embedder are the meaningful output.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericalError
from .rvq import MotionSequence

logger = logging.getLogger(__name__)

BEAT_SIGMA_SECONDS = 0.1


@dataclass
class MetricReport:
    fgd: float
    bc: float
    div: float
    mse: float
    lvd: float
    n_generated: int
    n_reference: int
    config_echo: dict

    def __post_init__(self):
        checks = {"fgd": self.fgd, "div": self.div, "mse": self.mse, "lvd": self.lvd}
        for name, value in checks.items():
            if value < 0:
                raise ConfigurationError(f"{name} must be nonnegative, got {value}")
        if not 0.0 <= self.bc <= 1.0:
            raise ConfigurationError(f"bc must lie in [0, 1], got {self.bc}")

    def machine_line(self) -> str:
        payload = {"fgd": self.fgd, "bc": self.bc, "div": self.div, "mse": self.mse,
                   "lvd": self.lvd, "n_generated": self.n_generated,
                   "n_reference": self.n_reference, **self.config_echo}
        return json.dumps(payload, sort_keys=True)

    def table(self) -> str:
        rows = [("FGD", self.fgd), ("BC", self.bc), ("DIV", self.div),
                ("MSE", self.mse), ("LVD", self.lvd)]
        lines = [f"{'metric':<8}{'value':>14}", "-" * 22]
        lines += [f"{name:<8}{value:>14.6f}" for name, value in rows]
        lines.append(f"samples: {self.n_generated} generated / {self.n_reference} reference")
        return "\n".join(lines)


def div(clips: list[MotionSequence]) -> float:
    """Mean absolute difference, averaged over unordered clip pairs."""
    if len(clips) < 2:
        raise DimensionError("diversity needs at least 2 clips")
    shapes = {c.frames.shape for c in clips}
    if len(shapes) != 1:
        raise DimensionError(f"clips differ in shape: {shapes}")
    pair_means = [float(np.mean(np.abs(a.frames - b.frames)))
                  for a, b in combinations(clips, 2)]
    return float(np.mean(pair_means))


def motion_beat_times(motion: MotionSequence, parts: tuple[str, ...] = ("hands", "upper")) -> np.ndarray:
    """Times (seconds) of local minima of aggregate joint speed."""
    channels = np.concatenate([motion.part(p) for p in parts], axis=1)
    speed = np.mean(np.abs(np.diff(channels, axis=0)), axis=1)
    if len(speed) < 3:
        return np.array([])
    interior = np.flatnonzero((speed[1:-1] <= speed[:-2]) & (speed[1:-1] < speed[2:])) + 1
    return (interior + 0.5) / motion.fps


def beat_consistency(motion: MotionSequence, audio_beats: list[float],
                     sigma: float = BEAT_SIGMA_SECONDS) -> float:
    """Mean Gaussian kernel between each audio beat and its nearest motion beat."""
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    if not audio_beats:
        return 0.0
    beats = motion_beat_times(motion)
    if beats.size == 0:
        logger.warning("beat_consistency: motion has no speed minima, scoring 0")
        return 0.0
    score = 0.0
    for t in audio_beats:
        dt = np.min(np.abs(beats - t))
        score += float(np.exp(-dt ** 2 / (2 * sigma ** 2)))
    return score / len(audio_beats)


def _face_pair(gen: MotionSequence, ref: MotionSequence) -> tuple[np.ndarray, np.ndarray]:
    if gen.frames.shape != ref.frames.shape:
        raise DimensionError(
            f"shape mismatch: {gen.frames.shape} vs {ref.frames.shape}")
    return gen.part("face"), ref.part("face")


def vertex_mse(gen: MotionSequence, ref: MotionSequence) -> float:
    a, b = _face_pair(gen, ref)
    return float(np.mean((a - b) ** 2))


def lvd(gen: MotionSequence, ref: MotionSequence) -> float:
    a, b = _face_pair(gen, ref)
    return float(np.mean(np.abs(a - b)))


def frechet_distance(mu1: np.ndarray, cov1: np.ndarray,
                     mu2: np.ndarray, cov2: np.ndarray) -> float:
    """||mu1-mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^{1/2}), PSD-safe and symmetric.

    The cross term is evaluated through the symmetric product
    C1^{1/2} C2 C1^{1/2}, whose eigenvalues match those of C1 C2.
    """
    diff = float(np.sum((mu1 - mu2) ** 2))
    w1, v1 = np.linalg.eigh(cov1)
    if np.min(w1) < -1e-8:
        raise NumericalError(f"covariance not PSD after regularization: min eig {np.min(w1)}")
    sqrt1 = (v1 * np.sqrt(np.clip(w1, 0, None))) @ v1.T
    inner = sqrt1 @ cov2 @ sqrt1
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if np.min(w) < -1e-8:
        raise NumericalError(f"cross-covariance product not PSD: min eig {np.min(w)}")
    cross = float(np.sum(np.sqrt(np.clip(w, 0, None))))
    return diff + float(np.trace(cov1) + np.trace(cov2)) - 2 * cross


def toy_fgd(generated: list[MotionSequence], reference: list[MotionSequence],
            embed: Callable[[MotionSequence], np.ndarray],
            regularization: float = 1e-6) -> float:
    """Fréchet distance between mean-pooled embedding distributions.

    `embed` maps a clip to per-token latents (e.g. the frozen tokenizer's
    encoder); each clip becomes the time-mean of those latents.
    """
    if len(generated) < 2 or len(reference) < 2:
        raise DimensionError("toy_fgd needs at least 2 samples on each side")

    def stats(clips):
        emb = np.stack([np.mean(embed(c), axis=0) for c in clips])
        mu = emb.mean(axis=0)
        cov = np.cov(emb, rowvar=False)
        cov = np.atleast_2d(cov) + regularization * np.eye(emb.shape[1])
        return mu, cov

    mu1, cov1 = stats(generated)
    mu2, cov2 = stats(reference)
    return frechet_distance(mu1, cov1, mu2, cov2)
