"""Procedural corpus of paired motion, speech-feature tracks, and labels.

Motion is a per-channel idle oscillation plus windowed gesture bursts on a
single body part per event. The low-level feature track carries event
onset timing (narrow kernel), the high-level track carries event identity
over the whole event span (wide kernel). Soft labels give, per latent
frame, the fraction of raw frames covered by any event.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, GenerationError
from .mam import SpeechFeatures
from .numerics import RngState
from .rvq import DOWNSCALE, PART_NAMES, MotionSequence, PartLayout

N_EVENT_SHAPES = 3
_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class GestureEvent:
    onset: int
    duration: int
    part: str
    amplitude: float
    shape_id: int

    def __post_init__(self):
        if self.part not in PART_NAMES:
            raise ConfigurationError(f"unknown part '{self.part}'")
        if self.amplitude <= 0 or self.duration < 1 or self.onset < 0:
            raise ConfigurationError(f"invalid event {self}")

    @property
    def end(self) -> int:
        return self.onset + self.duration


@dataclass
class SynthSample:
    motion: MotionSequence
    features: SpeechFeatures
    labels: np.ndarray  # (T_lat,) overlap fraction in [0, 1]
    events: list[GestureEvent]
    seed: int


@dataclass
class CorpusSpec:
    num_sequences: int = 512
    frames: int = 64
    layout: PartLayout = None  # type: ignore[assignment]
    fps: float = 30.0
    event_rate: float = 1.2       # expected events per second
    event_min_frames: int = 6
    event_max_frames: int = 14
    noise_level: float = 0.05
    idle_amplitude: float = 0.1
    feature_dim_low: int = 6
    feature_dim_high: int = 6

    def __post_init__(self):
        if self.layout is None:
            self.layout = PartLayout.from_sizes(4, 8, 8, 4)
        if self.frames % DOWNSCALE != 0:
            raise ConfigurationError(f"frames ({self.frames}) must be a multiple of {DOWNSCALE}")
        if self.event_max_frames >= self.frames:
            raise ConfigurationError("event duration bound exceeds sequence length")


def _gaussian_kernel(sigma: float) -> np.ndarray:
    half = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth(signal: np.ndarray, sigma: float) -> np.ndarray:
    kernel = _gaussian_kernel(sigma)
    if signal.ndim == 1:
        return np.convolve(signal, kernel, mode="same")
    return np.stack([np.convolve(signal[:, c], kernel, mode="same")
                     for c in range(signal.shape[1])], axis=1)


def _event_profile(duration: int, shape_id: int) -> np.ndarray:
    tau = np.linspace(0.0, 1.0, duration)
    window = 0.5 * (1.0 - np.cos(2 * math.pi * tau))  # Hann
    if shape_id == 0:
        return window * np.sin(2 * math.pi * 2.0 * tau)
    if shape_id == 1:
        return window * np.sin(2 * math.pi * 4.0 * tau)
    return window  # smooth bump


def _place_events(spec: CorpusSpec, gen: np.random.Generator) -> list[GestureEvent]:
    expected = spec.event_rate * spec.frames / spec.fps
    mean_duration = 0.5 * (spec.event_min_frames + spec.event_max_frames)
    if expected * mean_duration > 0.9 * spec.frames:
        raise GenerationError(
            f"event rate {spec.event_rate}/s too high: expected coverage "
            f"{expected * mean_duration:.0f} of {spec.frames} frames")
    for _ in range(_PLACEMENT_TRIES):
        count = int(gen.poisson(expected))
        durations = gen.integers(spec.event_min_frames, spec.event_max_frames + 1,
                                 size=count)
        if durations.sum() <= spec.frames:
            break
    else:
        raise GenerationError(
            f"could not fit {spec.event_rate}/s worth of non-overlapping events "
            f"into {spec.frames} frames")
    # spread the free frames over count+1 gaps (stars and bars)
    free = spec.frames - int(durations.sum())
    cuts = np.sort(gen.integers(0, free + 1, size=count)) if count else np.array([], int)
    events = []
    cursor = 0
    prev_cut = 0
    for i in range(count):
        cursor += int(cuts[i]) - prev_cut
        prev_cut = int(cuts[i])
        events.append(GestureEvent(
            onset=cursor,
            duration=int(durations[i]),
            part=PART_NAMES[int(gen.integers(0, 4))],
            amplitude=float(gen.uniform(0.8, 1.6)),
            shape_id=int(gen.integers(0, N_EVENT_SHAPES)),
        ))
        cursor += int(durations[i])
    return events


def event_labels(events: list[GestureEvent], frames: int) -> np.ndarray:
    """Per-latent-frame overlap fraction with the union of event windows."""
    covered = np.zeros(frames, dtype=bool)
    for e in events:
        covered[e.onset:e.end] = True
    return covered.reshape(frames // DOWNSCALE, DOWNSCALE).mean(axis=1)


def _sequence_seed(rng: RngState, index: int) -> RngState:
    return rng.split(index + 2)  # 0/1 reserved for corpus-level draws


def generate(spec: CorpusSpec, rng: RngState) -> list[SynthSample]:
    """Deterministic corpus: same (spec, rng) always yields identical samples."""
    corpus_gen = rng.split(0).generator()
    w_low = corpus_gen.uniform(0.6, 1.4, size=spec.feature_dim_low) * \
        np.where(np.arange(spec.feature_dim_low) % 2 == 0, 1.0, -1.0)
    w_shape = corpus_gen.normal(size=(N_EVENT_SHAPES, spec.feature_dim_high))

    channels = spec.layout.channels
    freqs = 0.4 + 0.37 * np.arange(channels)  # distinct idle frequency per channel
    t = np.arange(spec.frames) / spec.fps

    samples = []
    for i in range(spec.num_sequences):
        state = _sequence_seed(rng, i)
        gen = state.generator()
        phases = gen.uniform(0, 2 * math.pi, size=channels)
        motion = spec.idle_amplitude * np.sin(2 * math.pi * freqs[None, :] * t[:, None]
                                              + phases[None, :])
        events = _place_events(spec, gen)
        for e in events:
            profile = e.amplitude * _event_profile(e.duration, e.shape_id)
            sl = spec.layout.slice_of(e.part)
            gains = gen.uniform(0.5, 1.0, size=sl.stop - sl.start)
            motion[e.onset:e.end, sl] += profile[:, None] * gains[None, :]

        onset_track = np.zeros(spec.frames)
        shape_track = np.zeros((spec.frames, N_EVENT_SHAPES))
        for e in events:
            onset_track[e.onset] = 1.0
            shape_track[e.onset:e.end, e.shape_id] += e.amplitude
        low = _smooth(onset_track, sigma=1.5)[:, None] * w_low[None, :]
        high = _smooth(shape_track, sigma=6.0) @ w_shape
        if spec.noise_level > 0:
            low = low + spec.noise_level * gen.normal(size=low.shape)
            high = high + spec.noise_level * gen.normal(size=high.shape)

        samples.append(SynthSample(
            motion=MotionSequence(motion, spec.layout, spec.fps),
            features=SpeechFeatures(low, high),
            labels=event_labels(events, spec.frames),
            events=events,
            seed=state.counter,
        ))
    return samples


@dataclass
class CorpusStats:
    channel_mean: np.ndarray
    channel_std: np.ndarray
    velocity_percentiles: dict[int, float]
    velocity_median: float
    velocity_max: float
    event_density: float
    n_frames: int
    n_sequences: int


def frame_velocity(frames: np.ndarray) -> np.ndarray:
    """Mean absolute per-channel change between consecutive frames."""
    return np.mean(np.abs(np.diff(frames, axis=0)), axis=1)


def corpus_stats(samples: list[SynthSample]) -> CorpusStats:
    if not samples:
        raise ConfigurationError("empty corpus")
    total = np.zeros(samples[0].motion.frames.shape[1])
    total_sq = np.zeros_like(total)
    n = 0
    velocities = []
    n_events = 0
    seconds = 0.0
    for s in samples:
        f = s.motion.frames
        total += f.sum(axis=0)
        total_sq += (f ** 2).sum(axis=0)
        n += f.shape[0]
        velocities.append(frame_velocity(f))
        n_events += len(s.events)
        seconds += f.shape[0] / s.motion.fps
    mean = total / n
    var = np.maximum(total_sq / n - mean ** 2, 0.0)
    v = np.concatenate(velocities)
    return CorpusStats(
        channel_mean=mean,
        channel_std=np.sqrt(var),
        velocity_percentiles={p: float(np.percentile(v, p)) for p in (50, 90, 99)},
        velocity_median=float(np.median(v)),
        velocity_max=float(v.max()),
        event_density=n_events / seconds,
        n_frames=n,
        n_sequences=len(samples),
    )
