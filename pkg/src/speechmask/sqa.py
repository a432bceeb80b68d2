"""Speech-queried attention masking.

Per-part cross-attention maps between latent poses (keys) and motion-aligned
speech queries give a frame-level semantic score: the column sums of the
summed part maps. A linear soft-to-hard schedule splits the overall mask
ratio into hard (top scores), soft (score-proportional sampling), and random
components; selection keeps the three sets disjoint and never touches
protected seed positions.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numerics import ParamSet, RngState, attention_bwd, attention_fwd, layer_norm_bwd, layer_norm_fwd
from .rvq import PART_NAMES

logger = logging.getLogger(__name__)


@dataclass
class AttentionMap:
    """Per-part query-by-frame attention with aggregated frame scores."""

    per_part: dict[str, np.ndarray]
    total: np.ndarray
    scores: np.ndarray

    @classmethod
    def from_parts(cls, per_part: dict[str, np.ndarray]) -> "AttentionMap":
        if set(per_part) != set(PART_NAMES):
            raise ConfigurationError(f"expected parts {PART_NAMES}, got {tuple(per_part)}")
        shapes = {m.shape for m in per_part.values()}
        if len(shapes) != 1:
            raise DimensionError(f"per-part maps disagree in shape: {shapes}")
        total = sum(per_part[p] for p in PART_NAMES)
        return cls(dict(per_part), total, total.sum(axis=0))


def init_score_params(params: ParamSet, prefix: str, query_dim: int, key_dim: int,
                      score_dim: int, rng: np.random.Generator) -> None:
    for part in PART_NAMES:
        for name, d_in in (("wq", query_dim), ("wk", key_dim)):
            params.add(f"{prefix}.{part}.{name}.w",
                       rng.normal(scale=1.0 / np.sqrt(d_in), size=(d_in, score_dim)))
            params.add(f"{prefix}.{part}.{name}.b", np.zeros((1, score_dim)))


def attention_scores_fwd(latent_pose: np.ndarray, speech_queries: np.ndarray,
                         params: ParamSet, prefix: str):
    """Per-part maps softmax((Q wq)(p wk)ᵀ/√d) and their column-sum scores."""
    per_part = {}
    caches = {}
    for part in PART_NAMES:
        q = speech_queries @ params[f"{prefix}.{part}.wq.w"] + params[f"{prefix}.{part}.wq.b"]
        k = latent_pose @ params[f"{prefix}.{part}.wk.w"] + params[f"{prefix}.{part}.wk.b"]
        _, weights, cache = attention_fwd(q, k, None, q.shape[1])
        per_part[part] = weights
        caches[part] = cache
    return AttentionMap.from_parts(per_part), caches


def attention_scores_bwd(dscores: np.ndarray, amap: AttentionMap, caches,
                         latent_pose: np.ndarray, speech_queries: np.ndarray,
                         params: ParamSet, prefix: str):
    """Backward from d(scores); returns (d latent_pose, d speech_queries)."""
    dpose = np.zeros_like(latent_pose)
    dq_total = np.zeros_like(speech_queries)
    for part in PART_NAMES:
        dweights = np.broadcast_to(dscores[None, :], amap.per_part[part].shape)
        dq, dk, _ = attention_bwd(None, dweights, caches[part])
        params.accumulate(f"{prefix}.{part}.wq.w", speech_queries.T @ dq)
        params.accumulate(f"{prefix}.{part}.wq.b", dq.sum(axis=0, keepdims=True))
        params.accumulate(f"{prefix}.{part}.wk.w", latent_pose.T @ dk)
        params.accumulate(f"{prefix}.{part}.wk.b", dk.sum(axis=0, keepdims=True))
        dq_total += dq @ params[f"{prefix}.{part}.wq.w"].T
        dpose += dk @ params[f"{prefix}.{part}.wk.w"].T
    return dpose, dq_total


def attention_scores(latent_pose: np.ndarray, speech_queries: np.ndarray,
                     params: ParamSet, prefix: str = "score") -> AttentionMap:
    amap, _ = attention_scores_fwd(latent_pose, speech_queries, params, prefix)
    return amap


# ---------------------------------------------------------------------------
# soft-to-hard schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSchedule:
    """Linear interpolation of soft/hard mask fractions over training epochs."""

    mask_ratio: float
    soft_start: float
    soft_end: float
    hard_start: float
    hard_end: float
    total_epochs: int

    def __post_init__(self):
        ratios = (self.mask_ratio, self.soft_start, self.soft_end,
                  self.hard_start, self.hard_end)
        if any(not 0.0 <= r <= 1.0 for r in ratios):
            raise ConfigurationError(f"mask ratios must lie in [0, 1]: {ratios}")
        if self.total_epochs < 1:
            raise ConfigurationError("total_epochs must be >= 1")
        # linearity: checking both endpoints bounds every epoch in between
        for t, soft, hard in ((0, self.soft_start, self.hard_start),
                              (self.total_epochs, self.soft_end, self.hard_end)):
            if soft + hard > self.mask_ratio + 1e-12:
                raise ConfigurationError(
                    f"soft+hard ({soft}+{hard}) exceeds mask ratio "
                    f"{self.mask_ratio} at t={t}")


def schedule_at(sched: MaskSchedule, t: float) -> tuple[float, float, float]:
    """(soft, hard, random) fractions at epoch t; the three always sum to the mask ratio."""
    if not 0 <= t <= sched.total_epochs:
        raise ConfigurationError(f"epoch {t} outside [0, {sched.total_epochs}]")
    frac = t / sched.total_epochs
    soft = sched.soft_start + frac * (sched.soft_end - sched.soft_start)
    hard = sched.hard_start - frac * (sched.hard_start - sched.hard_end)
    return soft, hard, sched.mask_ratio - soft - hard


# ---------------------------------------------------------------------------
# mask selection
# ---------------------------------------------------------------------------

SOFT_SAMPLING_FLOOR = 1e-9


@dataclass
class MaskSpec:
    """Masked index set with per-index origin tags and the visible complement."""

    masked: np.ndarray
    visible: np.ndarray
    tags: dict[int, str] = field(default_factory=dict)
    protected: frozenset = frozenset()
    shortfall: int = 0

    @property
    def count(self) -> int:
        return len(self.masked)


def _weighted_draw_without_replacement(pool: list[int], weights: np.ndarray,
                                       count: int, gen: np.random.Generator) -> list[int]:
    chosen = []
    pool = list(pool)
    weights = weights.astype(np.float64).copy()
    for _ in range(count):
        cum = np.cumsum(weights)
        u = gen.random() * cum[-1]
        pick = int(np.searchsorted(cum, u, side="right"))
        pick = min(pick, len(pool) - 1)
        chosen.append(pool.pop(pick))
        weights = np.delete(weights, pick)
    return chosen


def select_mask(scores: np.ndarray, ratios: tuple[float, float, float],
                protected: frozenset | set = frozenset(),
                rng: RngState | None = None) -> MaskSpec:
    """Pick hard (top-score), soft (score-proportional), and random indices.

    Targets floor(sum(ratios) * T) masked positions; if too few unprotected
    frames exist the spec records the shortfall instead of failing.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise DimensionError("scores must be a vector")
    soft_ratio, hard_ratio, random_ratio = ratios
    if min(soft_ratio, hard_ratio, random_ratio) < -1e-12:
        raise ConfigurationError(f"negative mask ratio in {ratios}")
    t_lat = len(scores)
    protected = frozenset(int(i) for i in protected)
    n_total = int(np.floor((soft_ratio + hard_ratio + random_ratio) * t_lat + 1e-12))
    n_hard = int(np.floor(hard_ratio * t_lat + 1e-12))
    n_soft = int(np.floor(soft_ratio * t_lat + 1e-12))
    n_random = n_total - n_hard - n_soft

    gen = (rng if rng is not None else RngState(0)).generator()
    tags: dict[int, str] = {}

    # stable sort on -scores: equal scores resolve to the lower index
    order = [i for i in np.argsort(-scores, kind="stable") if i not in protected]
    hard = [int(i) for i in order[:n_hard]]
    for i in hard:
        tags[i] = "hard"

    pool = [i for i in range(t_lat) if i not in protected and i not in tags]
    take_soft = min(n_soft, len(pool))
    if take_soft:
        weights = np.maximum(scores[pool], SOFT_SAMPLING_FLOOR)
        for i in _weighted_draw_without_replacement(pool, weights, take_soft, gen):
            tags[i] = "soft"
        pool = [i for i in pool if i not in tags]

    take_random = min(n_random, len(pool))
    if take_random:
        for i in gen.permutation(len(pool))[:take_random]:
            tags[int(pool[int(i)])] = "random"

    masked = np.array(sorted(tags), dtype=np.int64)
    visible = np.array([i for i in range(t_lat) if i not in tags], dtype=np.int64)
    shortfall = n_total - len(masked)
    if shortfall > 0:
        logger.warning("mask shortfall: requested %d indices, only %d unprotected",
                       n_total, len(masked))
    return MaskSpec(masked, visible, tags, protected, shortfall)


# ---------------------------------------------------------------------------
# semantic supervision
# ---------------------------------------------------------------------------

def score_to_probability_fwd(scores: np.ndarray):
    """Standardize scores and squash: sigmoid((s - mean) / std)."""
    z, ln_cache = layer_norm_fwd(scores[None, :], np.ones((1, len(scores))),
                                 np.zeros((1, len(scores))), eps=1e-8)
    p = 1.0 / (1.0 + np.exp(-z[0]))
    return p, (ln_cache, p)


def score_to_probability_bwd(dz_row: np.ndarray, cache) -> np.ndarray:
    """Backward from gradients w.r.t. the pre-sigmoid standardized scores."""
    ln_cache, _ = cache
    ds, _, _ = layer_norm_bwd(dz_row[None, :], ln_cache)
    return ds[0]


def semantic_loss(predicted: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy between per-frame probabilities and soft labels."""
    predicted = np.asarray(predicted, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predicted.shape != labels.shape:
        raise DimensionError(
            f"label length {labels.shape} != score length {predicted.shape}")
    if np.any(predicted <= 0) or np.any(predicted >= 1):
        raise ConfigurationError("predicted scores must lie strictly inside (0, 1)")
    return float(-np.mean(labels * np.log(predicted)
                          + (1 - labels) * np.log(1 - predicted)))


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def export_attention(amap: AttentionMap, path: str | Path) -> list[Path]:
    """Write the total map (+ final score row) and one file per part map.

    Layout per file: header row of frame indices, one row per query; the
    total map's file ends with a "score" row.
    """
    path = Path(path)
    written = []

    def write(file: Path, matrix: np.ndarray, score_row: np.ndarray | None):
        with open(file, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(list(range(matrix.shape[1])))
            for row in matrix:
                writer.writerow([f"{v:.12g}" for v in row])
            if score_row is not None:
                writer.writerow([f"{v:.12g}" for v in score_row])
        written.append(file)

    write(path, amap.total, amap.scores)
    for part in PART_NAMES:
        write(path.with_suffix(f".{part}{path.suffix or '.csv'}"), amap.per_part[part], None)
    return written
