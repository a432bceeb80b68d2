"""Run configuration: dataclass defaults, named profiles, key=value files.

Unknown keys are rejected. `to_text`/`from_text` round-trip exactly so a
resolved config can be echoed into checkpoints and reparsed bit-identically.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigurationError
from .rvq import PartLayout
from .sqa import MaskSchedule


@dataclass
class Config:
    profile: str = "toy"
    seed: int = 0
    # corpus
    num_sequences: int = 512
    frames: int = 64
    fps: float = 30.0
    face_channels: int = 4
    hands_channels: int = 8
    upper_channels: int = 8
    lower_channels: int = 4
    event_rate: float = 1.2
    noise_level: float = 0.05
    feature_dim_low: int = 6
    feature_dim_high: int = 6
    holdout_fraction: float = 0.15
    # tokenizer
    latent_dim: int = 32
    encoder_hidden: int = 48
    codebook_entries: int = 64
    codebook_layers: int = 6
    commitment_weight: float = 0.25
    codebook_decay: float = 0.99
    quantizer_dropout: float = 0.2
    dead_code_batches: int = 32
    rvq_epochs: int = 30
    rvq_lr: float = 1e-3
    # alignment
    embed_dim: int = 32
    mam_heads: int = 2
    shared_blocks: int = 2
    temperature: float = 0.07
    mam_epochs: int = 30
    mam_batch_size: int = 8
    mam_lr: float = 1e-3
    # masked transformer
    model_width: int = 64
    model_blocks: int = 4
    model_heads: int = 4
    ff_mult: int = 2
    score_dim: int = 16
    semantic_weight: float = 0.1
    ema_decay: float = 0.999
    mask_ratio: float = 0.5
    soft_start: float = 0.3
    soft_end: float = 0.0
    hard_start: float = 0.0
    hard_end: float = 0.3
    epochs: int = 40
    batch_size: int = 16
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    # inference / evaluation
    strategy: str = "attention"
    steps: int = 1
    beat_sigma: float = 0.1
    eval_mask_repeats: int = 4

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigurationError(
                f"unknown profile '{self.profile}', expected one of {tuple(PROFILES)}")
        if self.strategy not in ("attention", "random", "loss"):
            raise ConfigurationError(f"unknown strategy '{self.strategy}'")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigurationError("holdout_fraction must lie in [0, 1)")

    @property
    def layout(self) -> PartLayout:
        return PartLayout.from_sizes(self.face_channels, self.hands_channels,
                                     self.upper_channels, self.lower_channels)

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)

    def schedule(self) -> MaskSchedule:
        return MaskSchedule(self.mask_ratio, self.soft_start, self.soft_end,
                            self.hard_start, self.hard_end, self.epochs)

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"


# full-scale hyperparameters stay expressible; the toy profile shrinks
# budgets (and raises learning rates) for minutes-scale single-core runs
PROFILES: dict[str, dict] = {
    "toy": {},
    "paper": {
        "codebook_entries": 256,
        "epochs": 200,
        "batch_size": 64,
        "lr": 1e-4,
        "rvq_lr": 1e-4,
        "mam_lr": 1e-4,
        "rvq_epochs": 200,
        "mam_epochs": 200,
    },
}

_FIELDS = {f.name: f.type for f in dataclasses.fields(Config)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"bad value for '{name}': {raw!r}") from exc


def parse_config_text(text: str) -> dict:
    """key=value lines; '#' starts a comment; unknown keys rejected."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigurationError(f"line {lineno}: unknown config key '{key}'")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(file_text: str | None = None, **overrides) -> Config:
    """Profile defaults, then config file, then explicit overrides."""
    file_values = parse_config_text(file_text) if file_text else {}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    for key in overrides:
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown config key '{key}'")
    profile = overrides.get("profile", file_values.get("profile", "toy"))
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile '{profile}'")
    merged: dict = {"profile": profile, **PROFILES[profile]}
    merged.update(file_values)
    merged.update(overrides)
    merged["profile"] = profile
    return Config(**merged)


def config_from_text(text: str) -> Config:
    return resolve_config(file_text=text)
